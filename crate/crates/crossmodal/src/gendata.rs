//! Dataset generation on disk: rendering, cloud sampling and manifests.
//!
//! Objects are generated in parallel and each writes `record.txt` last, so an
//! interrupted run resumes by skipping objects whose record exists. Object
//! `i` uses the stream `derive_seed(seed, i)`, which makes the output
//! independent of the worker count and identical to in-memory generation.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crossmodal_core::datasets::{generate_object, generate_toy_dataset, split_for, toy_splits, ObjectRecord, ToyDataset};
use crossmodal_core::mesh::{Split, TriangleMesh};
use crossmodal_core::{derive_seed, rng_from_seed};

use crate::config::{RunConfig, CONFIG_ECHO};
use crate::error::{Error, IoContext, Result};
use crate::formats::{decode_seg, encode_f32_image, encode_pcf, encode_png, encode_seg, read_file, write_atomic, write_cloud_csv};
use crate::manifest::{write_manifests, DatasetHeader, ObjectEntry, RenderEntry};
use crate::off::{read_off, write_off};

pub const OBJECTS_DIR: &str = "objects";
const RECORD: &str = "record.txt";

/// Keys whose values change generated data; a resumed run must agree on them.
const GENERATION_KEYS: &[&str] = &["profile", "seed", "classes", "per_class", "views", "resolution", "points", "oversample"];

/// Where an object's mesh comes from.
#[derive(Debug, Clone)]
pub enum MeshSource {
    InMemory { mesh: TriangleMesh, face_parts: Option<Vec<u8>> },
    File { path: PathBuf, parts: Option<PathBuf> },
}

#[derive(Debug, Clone)]
pub struct SourceObject {
    pub id: String,
    pub class: u32,
    pub split: Split,
    pub source: MeshSource,
}

/// Everything needed to generate a dataset.
#[derive(Debug, Clone)]
pub struct SourceSet {
    pub classes: Vec<String>,
    pub partition: Option<Vec<Vec<u8>>>,
    pub objects: Vec<SourceObject>,
}

pub fn toy_sources(toy: &ToyDataset) -> SourceSet {
    let splits = toy_splits(toy);
    let objects = toy
        .shapes
        .iter()
        .enumerate()
        .map(|(i, s)| SourceObject {
            id: format!("{i:06}_{}", s.class.name()),
            class: s.mesh.label().unwrap_or(0),
            split: splits[i],
            source: MeshSource::InMemory { mesh: s.mesh.clone(), face_parts: Some(s.face_parts.clone()) },
        })
        .collect();
    SourceSet { classes: toy.class_names(), partition: Some(toy.partition()), objects }
}

/// Toy shapes for the configured classes and count, drawn from the root seed.
pub fn toy_dataset(config: &RunConfig) -> Result<ToyDataset> {
    let mut rng = rng_from_seed(config.seed()?);
    Ok(generate_toy_dataset(&config.toy_classes()?, config.per_class()?, &mut rng)?)
}

/// Finds `*.off` files below `root`. The first directory level names the
/// class; a `train` or `test` directory anywhere in the path sets the split,
/// otherwise the first 80% of each class in path order are training objects.
/// A sibling `<stem>.seg` file holds per-face part labels.
pub fn discover_meshes(root: &Path) -> Result<SourceSet> {
    if !root.is_dir() {
        return Err(Error::Usage(format!("input directory {} does not exist", root.display())));
    }
    let mut files = Vec::new();
    for entry in walkdir::WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| Error::Usage(format!("cannot scan {}: {e}", root.display())))?;
        let p = entry.path();
        if entry.file_type().is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("off")) {
            files.push(p.strip_prefix(root).unwrap().to_path_buf());
        }
    }
    let class_of = |rel: &Path| -> String {
        let mut comps = rel.components();
        match (comps.next(), comps.next()) {
            (Some(c), Some(_)) => c.as_os_str().to_string_lossy().into_owned(),
            _ => "unlabelled".into(),
        }
    };
    let mut classes: Vec<String> = files.iter().map(|f| class_of(f)).collect();
    classes.sort();
    classes.dedup();
    let class_sizes: Vec<usize> = classes.iter().map(|c| files.iter().filter(|f| class_of(f) == *c).count()).collect();

    let mut seen = vec![0usize; classes.len()];
    let mut partition: Option<Vec<Vec<u8>>> = Some(vec![Vec::new(); classes.len()]);
    let mut objects = Vec::with_capacity(files.len());
    for (i, rel) in files.iter().enumerate() {
        let class = classes.iter().position(|c| *c == class_of(rel)).unwrap();
        let explicit = rel.components().find_map(|c| Split::parse(&c.as_os_str().to_string_lossy()));
        let split = explicit.unwrap_or_else(|| split_for(seen[class], class_sizes[class]));
        seen[class] += 1;
        let path = root.join(rel);
        let seg = path.with_extension("seg");
        let parts = seg.is_file().then_some(seg);
        match (&parts, partition.as_mut()) {
            (Some(seg), Some(p)) => match read_file(seg).and_then(|raw| decode_seg(&raw)) {
                Ok(labels) => {
                    p[class].extend(labels);
                    p[class].sort_unstable();
                    p[class].dedup();
                }
                Err(_) => partition = None,
            },
            _ => partition = None,
        }
        let stem = rel.file_stem().unwrap_or_default().to_string_lossy();
        objects.push(SourceObject { id: format!("{i:06}_{stem}"), class: class as u32, split, source: MeshSource::File { path, parts } });
    }
    if objects.is_empty() {
        return Err(Error::Usage(format!("no .off files under {}", root.display())));
    }
    Ok(SourceSet { classes, partition, objects })
}

/// Writes toy shapes as `<class>/<split>/<id>.off` with `<id>.seg` face
/// labels, a layout [`discover_meshes`] reads back.
pub fn write_toy_meshes(dir: &Path, toy: &ToyDataset) -> Result<usize> {
    let sources = toy_sources(toy);
    for (o, shape) in sources.objects.iter().zip(&toy.shapes) {
        let sub = dir.join(shape.class.name()).join(o.split.as_str());
        std::fs::create_dir_all(&sub).at(&sub)?;
        write_off(&sub.join(format!("{}.off", o.id)), &shape.mesh)?;
        write_atomic(&sub.join(format!("{}.seg", o.id)), &encode_seg(&shape.face_parts)?)?;
    }
    Ok(toy.shapes.len())
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GenSummary {
    pub generated: usize,
    pub already_complete: usize,
    pub failed: usize,
    pub images: usize,
    pub clouds: usize,
}

enum Outcome {
    Done { entry: ObjectEntry, renders: Vec<RenderEntry>, fresh: bool },
    Failed(String),
}

fn read_record(path: &Path) -> Option<(ObjectEntry, Vec<RenderEntry>)> {
    let text = std::fs::read_to_string(path).ok()?;
    let mut lines = text.lines();
    let entry = ObjectEntry::parse(lines.next()?).ok()?;
    let renders = lines.map(RenderEntry::parse).collect::<Result<Vec<_>>>().ok()?;
    (renders.len() == entry.views.len()).then_some((entry, renders))
}

fn load_mesh(obj: &SourceObject) -> Result<(TriangleMesh, Option<Vec<u8>>)> {
    match &obj.source {
        MeshSource::InMemory { mesh, face_parts } => Ok((mesh.clone(), face_parts.clone())),
        MeshSource::File { path, parts } => {
            let mesh = read_off(path)?.with_label(Some(obj.class));
            let parts = parts.as_ref().map(|p| decode_seg(&read_file(p)?)).transpose()?;
            Ok((mesh, parts))
        }
    }
}

fn write_object(dir: &Path, obj: &SourceObject, classes: &[String], rec: &ObjectRecord, cloud_csv: bool) -> Result<(ObjectEntry, Vec<RenderEntry>)> {
    let rel = format!("{OBJECTS_DIR}/{}", obj.id);
    let odir = dir.join(&rel);
    std::fs::create_dir_all(&odir).at(&odir)?;
    write_atomic(&odir.join("cloud.pcf"), &encode_pcf(&rec.cloud)?)?;
    if cloud_csv {
        write_cloud_csv(&odir.join("cloud.csv"), &rec.cloud, rec.point_parts.as_deref())?;
    }
    let parts = match &rec.point_parts {
        Some(p) => {
            write_atomic(&odir.join("parts.seg"), &encode_seg(p)?)?;
            Some(format!("{rel}/parts.seg"))
        }
        None => None,
    };
    let mut views = Vec::with_capacity(rec.views.len());
    let mut renders = Vec::with_capacity(rec.views.len());
    for (j, (img, cam)) in rec.views.iter().zip(&rec.cameras).enumerate() {
        write_atomic(&odir.join(format!("view_{j:03}.f32")), &encode_f32_image(img))?;
        write_atomic(&odir.join(format!("view_{j:03}.png")), &encode_png(img)?)?;
        views.push(format!("{rel}/view_{j:03}.f32"));
        renders.push(RenderEntry {
            object_id: obj.id.clone(),
            view_id: j,
            azimuth: cam.azimuth,
            polar: cam.polar,
            path: format!("{rel}/view_{j:03}.png"),
        });
    }
    let entry = ObjectEntry {
        id: obj.id.clone(),
        class: classes[obj.class as usize].clone(),
        split: obj.split,
        cloud: format!("{rel}/cloud.pcf"),
        parts,
        views,
    };
    let mut record = entry.to_line();
    record.push('\n');
    for r in &renders {
        record += &r.to_line();
        record.push('\n');
    }
    write_atomic(&odir.join(RECORD), record.as_bytes())?;
    Ok((entry, renders))
}

/// Refuses to resume into a directory generated with different settings.
fn check_resumable(dir: &Path, config: &RunConfig) -> Result<()> {
    let echo = dir.join(CONFIG_ECHO);
    let Ok(text) = std::fs::read_to_string(&echo) else { return Ok(()) };
    let previous = crate::config::parse_config_text(&text)?;
    for key in GENERATION_KEYS {
        let old = previous.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str());
        if old.is_some_and(|o| o != config.get(key)) {
            return Err(Error::Usage(format!(
                "{} holds a dataset generated with {key}={}, now {key}={}",
                dir.display(),
                old.unwrap(),
                config.get(key)
            )));
        }
    }
    Ok(())
}

/// Generates (or completes) a dataset in `dir`.
pub fn generate(dir: &Path, sources: &SourceSet, config: &RunConfig, cloud_csv: bool) -> Result<GenSummary> {
    let render = config.render_config()?;
    let sampling = config.sampling_config()?;
    let seed = config.seed()?;
    std::fs::create_dir_all(dir).at(dir)?;
    check_resumable(dir, config)?;
    config.echo(dir)?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers()?)
        .build()
        .map_err(|e| Error::Config(format!("cannot start workers: {e}")))?;
    let outcomes: Vec<Outcome> = pool.install(|| {
        sources
            .objects
            .par_iter()
            .enumerate()
            .map(|(i, obj)| {
                let record = dir.join(OBJECTS_DIR).join(&obj.id).join(RECORD);
                if let Some((entry, renders)) = read_record(&record) {
                    if renders.len() == render.view_count {
                        return Outcome::Done { entry, renders, fresh: false };
                    }
                }
                let result = load_mesh(obj).and_then(|(mesh, parts)| {
                    let rec = generate_object(&mesh, parts.as_deref(), obj.split, &render, &sampling, derive_seed(seed, i as u64))?;
                    write_object(dir, obj, &sources.classes, &rec, cloud_csv)
                });
                match result {
                    Ok((entry, renders)) => Outcome::Done { entry, renders, fresh: true },
                    Err(e) => Outcome::Failed(format!("object `{}`: {e}", obj.id)),
                }
            })
            .collect()
    });

    let mut summary = GenSummary::default();
    let mut entries = Vec::new();
    let mut renders = Vec::new();
    for o in outcomes {
        match o {
            Outcome::Done { entry, renders: r, fresh } => {
                if fresh {
                    summary.generated += 1;
                } else {
                    summary.already_complete += 1;
                }
                summary.images += r.len();
                summary.clouds += 1;
                entries.push(entry);
                renders.extend(r);
            }
            Outcome::Failed(msg) => {
                log::warn!("skipped {msg}");
                summary.failed += 1;
            }
        }
    }
    let labelled = entries.iter().all(|e| e.parts.is_some());
    let header = DatasetHeader {
        classes: sources.classes.clone(),
        partition: sources.partition.clone().filter(|_| labelled && !entries.is_empty()),
        width: render.width,
        height: render.height,
        views: render.view_count,
        points: sampling.points,
        radius: render.radius,
        fov_y: render.fov_y,
    };
    write_manifests(dir, &header, &entries, &renders)?;
    Ok(summary)
}
