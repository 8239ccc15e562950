//! Plain-text manifests describing a generated dataset, and loading a
//! dataset back into memory.
//!
//! `dataset.txt` starts with `# key=value` header lines (classes, part
//! partition, image size, view and point counts, camera radius and field of
//! view) followed by one tab-separated row per object:
//! `object_id class split cloud parts views`, where `parts` is `-` for
//! unlabelled objects and `views` is a comma-separated list of flat `f32`
//! dumps. `render.txt` has one row per image:
//! `object_id view_id azimuth polar path` with the PNG path. Paths are
//! relative to the dataset directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crossmodal_core::datasets::{GeneratedStore, ObjectRecord};
use crossmodal_core::mesh::Split;
use crossmodal_core::render::Camera;

use crate::error::{Error, IoContext, Result};
use crate::formats::{decode_f32_image, decode_pcf, decode_seg, read_file, write_atomic};

pub const DATASET_MANIFEST: &str = "dataset.txt";
pub const RENDER_MANIFEST: &str = "render.txt";
const DATASET_COLUMNS: &str = "object_id\tclass\tsplit\tcloud\tparts\tviews";
const RENDER_COLUMNS: &str = "object_id\tview_id\tazimuth\tpolar\tpath";

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetHeader {
    pub classes: Vec<String>,
    /// Part ids per class, when the objects carry part labels.
    pub partition: Option<Vec<Vec<u8>>>,
    pub width: usize,
    pub height: usize,
    pub views: usize,
    pub points: usize,
    pub radius: f64,
    pub fov_y: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectEntry {
    pub id: String,
    pub class: String,
    pub split: Split,
    pub cloud: String,
    pub parts: Option<String>,
    pub views: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderEntry {
    pub object_id: String,
    pub view_id: usize,
    pub azimuth: f64,
    pub polar: f64,
    pub path: String,
}

fn format_partition(p: &[Vec<u8>]) -> String {
    p.iter()
        .map(|c| c.iter().map(u8::to_string).collect::<Vec<_>>().join(","))
        .collect::<Vec<_>>()
        .join(";")
}

fn parse_partition(s: &str) -> Result<Vec<Vec<u8>>> {
    s.split(';')
        .map(|c| {
            c.split(',')
                .map(|v| v.trim().parse().map_err(|_| Error::Format(format!("bad part id `{v}` in partition"))))
                .collect()
        })
        .collect()
}

impl DatasetHeader {
    pub fn to_lines(&self) -> String {
        let mut s = String::from("# crossmodal dataset\n");
        s += &format!("# classes={}\n", self.classes.join(","));
        if let Some(p) = &self.partition {
            s += &format!("# partition={}\n", format_partition(p));
        }
        s += &format!(
            "# width={}\n# height={}\n# views={}\n# points={}\n# radius={}\n# fov_y={}\n",
            self.width, self.height, self.views, self.points, self.radius, self.fov_y
        );
        s
    }

    fn from_pairs(kv: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| kv.get(k).ok_or_else(|| Error::Format(format!("dataset manifest lacks `{k}`")));
        fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Format(format!("dataset manifest: bad `{k}` value `{v}`")))
        }
        Ok(Self {
            classes: get("classes")?.split(',').map(str::to_string).collect(),
            partition: kv.get("partition").map(|p| parse_partition(p)).transpose()?,
            width: num("width", get("width")?)?,
            height: num("height", get("height")?)?,
            views: num("views", get("views")?)?,
            points: num("points", get("points")?)?,
            radius: num("radius", get("radius")?)?,
            fov_y: num("fov_y", get("fov_y")?)?,
        })
    }
}

impl ObjectEntry {
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            self.id,
            self.class,
            self.split.as_str(),
            self.cloud,
            self.parts.as_deref().unwrap_or("-"),
            self.views.join(",")
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split('\t').collect();
        let [id, class, split, cloud, parts, views] = f[..] else {
            return Err(Error::Format(format!("dataset row needs 6 fields: `{line}`")));
        };
        Ok(Self {
            id: id.into(),
            class: class.into(),
            split: Split::parse(split).ok_or_else(|| Error::Format(format!("unknown split `{split}`")))?,
            cloud: cloud.into(),
            parts: (parts != "-").then(|| parts.into()),
            views: views.split(',').map(str::to_string).collect(),
        })
    }
}

impl RenderEntry {
    pub fn to_line(&self) -> String {
        format!("{}\t{}\t{}\t{}\t{}", self.object_id, self.view_id, self.azimuth, self.polar, self.path)
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split('\t').collect();
        let [object_id, view, az, polar, path] = f[..] else {
            return Err(Error::Format(format!("render row needs 5 fields: `{line}`")));
        };
        let num = |v: &str| v.parse::<f64>().map_err(|_| Error::Format(format!("bad angle `{v}`")));
        Ok(Self {
            object_id: object_id.into(),
            view_id: view.parse().map_err(|_| Error::Format(format!("bad view id `{view}`")))?,
            azimuth: num(az)?,
            polar: num(polar)?,
            path: path.into(),
        })
    }
}

/// Splits a manifest into its `# key=value` header and data rows; the column
/// line must match `columns`.
fn split_manifest<'a>(text: &'a str, columns: &str) -> Result<(BTreeMap<String, String>, Vec<&'a str>)> {
    let mut kv = BTreeMap::new();
    let mut rows = Vec::new();
    let mut seen_columns = false;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        if let Some(h) = line.strip_prefix('#') {
            if let Some((k, v)) = h.trim().split_once('=') {
                kv.insert(k.trim().to_string(), v.trim().to_string());
            }
        } else if !seen_columns {
            if line != columns {
                return Err(Error::Format(format!("expected column line `{columns}`, found `{line}`")));
            }
            seen_columns = true;
        } else {
            rows.push(line);
        }
    }
    if !seen_columns {
        return Err(Error::Format("manifest has no column line".into()));
    }
    Ok((kv, rows))
}

pub fn format_dataset_manifest(header: &DatasetHeader, objects: &[ObjectEntry]) -> String {
    let mut s = header.to_lines();
    s += DATASET_COLUMNS;
    s.push('\n');
    for o in objects {
        s += &o.to_line();
        s.push('\n');
    }
    s
}

pub fn parse_dataset_manifest(text: &str) -> Result<(DatasetHeader, Vec<ObjectEntry>)> {
    let (kv, rows) = split_manifest(text, DATASET_COLUMNS)?;
    let header = DatasetHeader::from_pairs(&kv)?;
    let objects = rows.into_iter().map(ObjectEntry::parse).collect::<Result<_>>()?;
    Ok((header, objects))
}

pub fn format_render_manifest(rows: &[RenderEntry]) -> String {
    let mut s = String::from(RENDER_COLUMNS);
    s.push('\n');
    for r in rows {
        s += &r.to_line();
        s.push('\n');
    }
    s
}

pub fn parse_render_manifest(text: &str) -> Result<Vec<RenderEntry>> {
    let (_, rows) = split_manifest(text, RENDER_COLUMNS)?;
    rows.into_iter().map(RenderEntry::parse).collect()
}

pub fn write_manifests(dir: &Path, header: &DatasetHeader, objects: &[ObjectEntry], renders: &[RenderEntry]) -> Result<()> {
    write_atomic(&dir.join(DATASET_MANIFEST), format_dataset_manifest(header, objects).as_bytes())?;
    write_atomic(&dir.join(RENDER_MANIFEST), format_render_manifest(renders).as_bytes())
}

/// A dataset read back from disk.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub dir: PathBuf,
    pub header: DatasetHeader,
    pub ids: Vec<String>,
    pub store: GeneratedStore,
}

impl LoadedDataset {
    /// Part ids per class; errors when the objects carry no part labels.
    pub fn partition(&self) -> Result<&[Vec<u8>]> {
        self.header
            .partition
            .as_deref()
            .ok_or_else(|| Error::Usage(format!("dataset {} has no part labels", self.dir.display())))
    }

    pub fn num_parts(&self) -> Result<usize> {
        let p = self.partition()?;
        Ok(p.iter().flatten().map(|&x| x as usize + 1).max().unwrap_or(0))
    }
}

pub fn load_dataset(dir: &Path) -> Result<LoadedDataset> {
    let manifest = dir.join(DATASET_MANIFEST);
    if !manifest.is_file() {
        return Err(Error::Usage(format!("no dataset at {} (run `gen-data` first)", dir.display())));
    }
    let text = std::fs::read_to_string(&manifest).at(&manifest)?;
    let (header, entries) = parse_dataset_manifest(&text)?;
    let render_path = dir.join(RENDER_MANIFEST);
    let renders = parse_render_manifest(&std::fs::read_to_string(&render_path).at(&render_path)?)?;
    let mut angles: BTreeMap<(&str, usize), (f64, f64)> = BTreeMap::new();
    for r in &renders {
        angles.insert((r.object_id.as_str(), r.view_id), (r.azimuth, r.polar));
    }

    let mut objects = Vec::with_capacity(entries.len());
    for e in &entries {
        let class = header
            .classes
            .iter()
            .position(|c| *c == e.class)
            .ok_or_else(|| Error::Format(format!("object `{}` has undeclared class `{}`", e.id, e.class)))?;
        let views = e
            .views
            .iter()
            .map(|v| decode_f32_image(&read_file(&dir.join(v))?, header.width, header.height))
            .collect::<Result<Vec<_>>>()?;
        let cameras = (0..views.len())
            .map(|j| {
                let (azimuth, polar) = *angles
                    .get(&(e.id.as_str(), j))
                    .ok_or_else(|| Error::Format(format!("render manifest lacks view {j} of `{}`", e.id)))?;
                Ok(Camera { azimuth, polar, radius: header.radius, look_at: [0.0; 3], fov_y: header.fov_y, up: [0.0, 1.0, 0.0] })
            })
            .collect::<Result<Vec<_>>>()?;
        let cloud = decode_pcf(&read_file(&dir.join(&e.cloud))?)?;
        let point_parts = e.parts.as_ref().map(|p| decode_seg(&read_file(&dir.join(p))?)).transpose()?;
        if let Some(p) = &point_parts {
            if p.len() != cloud.len() {
                return Err(Error::Format(format!("object `{}`: {} part labels for {} points", e.id, p.len(), cloud.len())));
            }
        }
        objects.push(ObjectRecord { class: class as u32, split: e.split, views, cameras, cloud, point_parts });
    }
    Ok(LoadedDataset {
        dir: dir.to_path_buf(),
        ids: entries.into_iter().map(|e| e.id).collect(),
        store: GeneratedStore { objects, class_names: header.classes.clone() },
        header,
    })
}
