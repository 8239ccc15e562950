use crossmodal::checkpoint::{decode_checkpoint, encode_checkpoint};
use crossmodal::formats::{decode_pcf, decode_seg, encode_pcf, encode_seg};
use crossmodal::off::{parse_off, serialize_off};
use crossmodal::report::{format_trace, parse_trace};
use crossmodal_core::autodiff::{ParamKind, ParamStore, Tensor};
use crossmodal_core::encoders::EncoderParams;
use crossmodal_core::mesh::TriangleMesh;
use crossmodal_core::pointcloud::PointCloud;
use crossmodal_core::trainer::TraceRow;
use proptest::prelude::*;

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![-1e6f64..1e6, (-40i32..40).prop_map(|e| 1.234_567_890_123 * 10f64.powi(e)), Just(0.0), Just(-0.0)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn off_round_trip_is_exact(
        vertices in prop::collection::vec(prop::array::uniform3(finite()), 3..20),
        picks in prop::collection::vec(prop::array::uniform3(any::<prop::sample::Index>()), 1..20),
    ) {
        let faces: Vec<[u32; 3]> = picks.iter().map(|f| f.map(|i| i.index(vertices.len()) as u32)).collect();
        let mesh = TriangleMesh::new(vertices, faces, None);
        prop_assume!(mesh.is_ok());
        let mesh = mesh.unwrap();
        let back = parse_off(serialize_off(&mesh).as_bytes()).unwrap();
        prop_assert_eq!(back.faces(), mesh.faces());
        for (a, b) in back.vertices().iter().zip(mesh.vertices()) {
            prop_assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits() || (*x == 0.0 && *y == 0.0)));
        }
    }

    #[test]
    fn point_cloud_and_parts_round_trip(
        points in prop::collection::vec(prop::array::uniform3(-10.0f32..10.0), 1..100),
        seed in any::<u8>(),
    ) {
        let cloud = PointCloud::new(points.iter().map(|p| p.map(f64::from)).collect());
        let back = decode_pcf(&encode_pcf(&cloud).unwrap()).unwrap();
        prop_assert_eq!(&back, &cloud);
        let parts: Vec<u8> = (0..points.len()).map(|i| (i as u8).wrapping_mul(seed)).collect();
        prop_assert_eq!(decode_seg(&encode_seg(&parts).unwrap()).unwrap(), parts);
    }

    #[test]
    fn truncated_point_cloud_is_rejected(points in prop::collection::vec(prop::array::uniform3(-1.0f32..1.0), 1..20), cut in any::<prop::sample::Index>()) {
        let cloud = PointCloud::new(points.iter().map(|p| p.map(f64::from)).collect());
        let bytes = encode_pcf(&cloud).unwrap();
        let at = cut.index(bytes.len());
        prop_assert!(decode_pcf(&bytes[..at]).is_err());
    }

    #[test]
    fn trace_round_trip_is_exact(rows in prop::collection::vec((0u64..1_000_000, finite(), finite(), finite(), 0.0f64..1.0), 0..30)) {
        let rows: Vec<TraceRow> = rows
            .into_iter()
            .map(|(iteration, l_triplet, l_cross, l_self, lr)| TraceRow { iteration, l_triplet, l_cross, l_self, lr })
            .collect();
        let back = parse_trace(&format_trace(&rows)).unwrap();
        prop_assert_eq!(back, rows);
    }

    #[test]
    fn checkpoint_round_trip_is_exact(
        tensors in prop::collection::vec(prop::collection::vec(-5.0f32..5.0, 1..12), 1..6),
        iteration in 0u64..(1 << 24),
        seed in any::<u64>(),
    ) {
        let mut store = ParamStore::new();
        for (i, v) in tensors.iter().enumerate() {
            store.insert(&format!("t{i}.w"), Tensor::new(vec![v.len()], v.clone()).unwrap(), ParamKind::Weight).unwrap();
        }
        let params = EncoderParams { store, iteration, seed };
        let back = decode_checkpoint(&encode_checkpoint(&params).unwrap()).unwrap();
        prop_assert_eq!(back.iteration, iteration);
        prop_assert_eq!(back.seed, seed);
        let expect: Vec<(String, Tensor<f32>)> = params.store.entries().iter().map(|e| (e.name.clone(), e.value.clone())).collect();
        prop_assert_eq!(back.tensors, expect);
    }
}
