//! Annotated image indices: jsonl and VOC-XML ingestion.
//!
//! jsonl records are one per line:
//! `{"image": "images/a.pgm", "objects": [{"class": "car", "bbox": [x, y, w, h]}]}`
//! with image paths relative to the dataset root. VOC boxes are 1-based
//! inclusive corners and are converted to the same `[x, y, w, h]` form.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use fvdet_core::error::{Error, Result};
use fvdet_core::geometry::Window;
use fvdet_core::image::GrayImage;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Object {
    pub class: String,
    pub bbox: Window,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    /// Relative to the index root.
    pub image: PathBuf,
    pub width: usize,
    pub height: usize,
    pub objects: Vec<Object>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub split: String,
    pub records: Vec<Record>,
}

#[derive(Serialize, Deserialize)]
struct JsonObject {
    class: String,
    bbox: [i64; 4],
}

#[derive(Serialize, Deserialize)]
struct JsonRecord {
    image: String,
    #[serde(default)]
    objects: Vec<JsonObject>,
}

impl DatasetIndex {
    pub fn image_path(&self, record: &Record) -> PathBuf {
        self.root.join(&record.image)
    }

    pub fn load_image(&self, i: usize) -> Result<GrayImage> {
        GrayImage::load(&self.image_path(&self.records[i]))
    }

    /// Sorted distinct class names.
    pub fn class_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .records
            .iter()
            .flat_map(|r| r.objects.iter().map(|o| o.class.clone()))
            .collect();
        names.sort();
        names.dedup();
        names
    }

    pub fn class_counts(&self) -> BTreeMap<String, usize> {
        let mut counts = BTreeMap::new();
        for o in self.records.iter().flat_map(|r| &r.objects) {
            *counts.entry(o.class.clone()).or_insert(0) += 1;
        }
        counts
    }

    /// Serializes in the jsonl ingestion format.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            let rec = JsonRecord {
                image: r.image.to_string_lossy().replace('\\', "/"),
                objects: r
                    .objects
                    .iter()
                    .map(|o| JsonObject {
                        class: o.class.clone(),
                        bbox: [o.bbox.x, o.bbox.y, o.bbox.w, o.bbox.h].map(i64::from),
                    })
                    .collect(),
            };
            out.push_str(&serde_json::to_string(&rec).expect("plain data"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(self.to_jsonl().as_bytes())?;
        Ok(())
    }
}

fn malformed(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::MalformedRecord {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Decodes the image to learn its size and checks every box against it.
fn validate(root: &Path, image: PathBuf, raw: Vec<(String, [i64; 4])>, src: &Path, line: usize) -> Result<Record> {
    let full = root.join(&image);
    if !full.is_file() {
        return Err(Error::MissingImage(full));
    }
    let img = GrayImage::load(&full)?;
    let (width, height) = (img.width(), img.height());
    let mut objects = Vec::with_capacity(raw.len());
    for (class, b) in raw {
        if class.is_empty() {
            return Err(malformed(src, line, "empty class name"));
        }
        let fits = b[0] >= 0
            && b[1] >= 0
            && b[2] >= 1
            && b[3] >= 1
            && b[0] + b[2] <= width as i64
            && b[1] + b[3] <= height as i64;
        if !fits {
            return Err(Error::BoxOutOfBounds {
                path: full,
                bbox: b,
                width: width as u32,
                height: height as u32,
            });
        }
        objects.push(Object {
            class,
            bbox: Window::new(b[0] as u32, b[1] as u32, b[2] as u32, b[3] as u32),
        });
    }
    Ok(Record {
        image,
        width,
        height,
        objects,
    })
}

/// Reads a jsonl annotation file; image paths are relative to `root`.
pub fn ingest_jsonl(path: &Path, root: &Path, split: &str) -> Result<DatasetIndex> {
    let text = fs::read_to_string(path)?;
    let mut records = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonRecord = serde_json::from_str(line).map_err(|e| malformed(path, line_no, e.to_string()))?;
        if rec.image.is_empty() {
            return Err(malformed(path, line_no, "empty image path"));
        }
        let raw = rec.objects.into_iter().map(|o| (o.class, o.bbox)).collect();
        records.push(validate(root, PathBuf::from(rec.image), raw, path, line_no)?);
    }
    Ok(DatasetIndex {
        root: root.to_path_buf(),
        split: split.to_string(),
        records,
    })
}

fn child_text<'a>(node: roxmltree::Node<'a, 'a>, name: &str) -> Option<&'a str> {
    node.children().find(|c| c.has_tag_name(name)).and_then(|c| c.text()).map(str::trim)
}

/// Parses one VOC annotation. Image paths become `JPEGImages/<filename>`.
pub fn parse_voc_xml(path: &Path, text: &str) -> Result<(PathBuf, Vec<(String, [i64; 4])>)> {
    let doc = roxmltree::Document::parse(text).map_err(|e| malformed(path, e.pos().row as usize, e.to_string()))?;
    let root = doc.root_element();
    let line_of = |n: roxmltree::Node| doc.text_pos_at(n.range().start).row as usize;
    let filename =
        child_text(root, "filename").ok_or_else(|| malformed(path, line_of(root), "missing <filename>"))?;
    let mut objects = Vec::new();
    for obj in root.children().filter(|c| c.has_tag_name("object")) {
        let line = line_of(obj);
        let name = child_text(obj, "name").ok_or_else(|| malformed(path, line, "object without <name>"))?;
        let bb = obj
            .children()
            .find(|c| c.has_tag_name("bndbox"))
            .ok_or_else(|| malformed(path, line, "object without <bndbox>"))?;
        let coord = |tag: &str| -> Result<i64> {
            let t = child_text(bb, tag).ok_or_else(|| malformed(path, line_of(bb), format!("missing <{tag}>")))?;
            // some annotations store corners as decimals
            t.parse::<f64>()
                .map(|v| v.round() as i64)
                .map_err(|_| malformed(path, line_of(bb), format!("bad <{tag}> `{t}`")))
        };
        let (x0, y0, x1, y1) = (coord("xmin")?, coord("ymin")?, coord("xmax")?, coord("ymax")?);
        objects.push((name.to_string(), [x0 - 1, y0 - 1, x1 - x0 + 1, y1 - y0 + 1]));
    }
    Ok((Path::new("JPEGImages").join(filename), objects))
}

/// Reads `root/Annotations/*.xml`, restricted to the ids listed in
/// `root/ImageSets/Main/<split>.txt` when that file exists.
pub fn ingest_voc(root: &Path, split: &str) -> Result<DatasetIndex> {
    let ann = root.join("Annotations");
    let list = root.join("ImageSets").join("Main").join(format!("{split}.txt"));
    let mut files: Vec<PathBuf> = if list.is_file() {
        fs::read_to_string(&list)?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(|id| ann.join(format!("{id}.xml")))
            .collect()
    } else {
        let mut v: Vec<PathBuf> = fs::read_dir(&ann)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "xml"))
            .collect();
        v.sort();
        v
    };
    files.dedup();
    let mut records = Vec::with_capacity(files.len());
    for f in &files {
        let text = fs::read_to_string(f)?;
        let (image, objects) = parse_voc_xml(f, &text)?;
        records.push(validate(root, image, objects, f, 1)?);
    }
    Ok(DatasetIndex {
        root: root.to_path_buf(),
        split: split.to_string(),
        records,
    })
}
