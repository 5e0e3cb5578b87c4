use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DataError, GrayImage, Result, CANVAS_H, CANVAS_W};
use crate::geometry::{BBox, PointSet32, ToothId, TEETH};

pub const ANNOTATION_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToothAnnotation {
    pub tooth: ToothId,
    pub present: bool,
    /// Annotated whether or not the tooth exists.
    pub bbox: BBox,
}

/// One canvas image with all 32 annotations, ordered by tooth index.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: GrayImage,
    pub teeth: Vec<ToothAnnotation>,
}

impl Scene {
    pub fn tooth(&self, id: ToothId) -> &ToothAnnotation {
        &self.teeth[id.index() as usize - 1]
    }

    pub fn centers(&self) -> PointSet32 {
        let flat: Vec<f64> = (0..TEETH)
            .flat_map(|p| {
                let b = self.tooth(ToothId::from_flat(p)).bbox;
                [b.cx, b.cy]
            })
            .collect();
        PointSet32::from_flat(&flat).expect("64 values")
    }

    /// `(w, h)` per tooth in flattened point order.
    pub fn sizes(&self) -> Vec<f64> {
        (0..TEETH)
            .flat_map(|p| {
                let b = self.tooth(ToothId::from_flat(p)).bbox;
                [b.w, b.h]
            })
            .collect()
    }

    pub fn boxes(&self) -> Vec<BBox> {
        self.teeth.iter().map(|t| t.bbox).collect()
    }
}

/// Serialized tooth entry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToothRecord {
    pub id: u32,
    pub present: bool,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// On-disk annotation document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationFile {
    pub version: u32,
    /// Image path relative to the annotation file's directory.
    pub image: String,
    pub width: u32,
    pub height: u32,
    pub teeth: Vec<ToothRecord>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub predicted: bool,
}

impl AnnotationFile {
    pub fn from_teeth(image: &str, teeth: &[ToothAnnotation], predicted: bool) -> Self {
        Self {
            version: ANNOTATION_VERSION,
            image: image.to_string(),
            width: CANVAS_W,
            height: CANVAS_H,
            teeth: teeth
                .iter()
                .map(|t| ToothRecord {
                    id: t.tooth.index(),
                    present: t.present,
                    cx: t.bbox.cx,
                    cy: t.bbox.cy,
                    w: t.bbox.w,
                    h: t.bbox.h,
                })
                .collect(),
            predicted,
        }
    }

    /// Schema checks beyond what the JSON shape enforces. Returns the teeth in
    /// index order.
    pub fn validate(&self, path: &Path) -> Result<Vec<ToothAnnotation>> {
        let path = path.to_path_buf();
        if self.version != ANNOTATION_VERSION {
            return Err(DataError::Version { path, version: self.version });
        }
        if self.teeth.len() != TEETH {
            return Err(DataError::ToothCount { path, found: self.teeth.len() });
        }
        if (self.width, self.height) != (CANVAS_W, CANVAS_H) {
            return Err(DataError::Field {
                path,
                field: "width/height".into(),
                message: format!("expected 768x512 canvas, got {}x{}", self.width, self.height),
            });
        }
        let mut slots: Vec<Option<ToothAnnotation>> = vec![None; TEETH];
        for (entry, r) in self.teeth.iter().enumerate() {
            let tooth = ToothId::new(r.id).map_err(|_| DataError::ToothIndex { path: path.clone(), entry, index: r.id })?;
            for (name, v) in [("cx", r.cx), ("cy", r.cy), ("w", r.w), ("h", r.h)] {
                if !v.is_finite() || ((name == "w" || name == "h") && v <= 0.0) {
                    return Err(DataError::Field {
                        path,
                        field: format!("teeth[{entry}].{name}"),
                        message: format!("invalid value {v}"),
                    });
                }
            }
            let slot = &mut slots[r.id as usize - 1];
            if slot.is_some() {
                return Err(DataError::DuplicateTooth { path, index: r.id });
            }
            *slot = Some(ToothAnnotation { tooth, present: r.present, bbox: BBox::new(r.cx, r.cy, r.w, r.h) });
        }
        Ok(slots.into_iter().map(|s| s.expect("32 distinct ids in range")).collect())
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

pub fn read_annotation(path: &Path) -> Result<AnnotationFile> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| DataError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}

pub fn write_annotation(path: &Path, doc: &AnnotationFile) -> Result<()> {
    let text = serde_json::to_string_pretty(doc).expect("annotation serializes");
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, text + "\n").map_err(io_err(path))
}

fn image_path(json_path: &Path, rel: &str) -> PathBuf {
    json_path.parent().unwrap_or(Path::new(".")).join(rel)
}

/// Load an annotation file and the grayscale image it references.
pub fn load_scene(json_path: &Path) -> Result<Scene> {
    let doc = read_annotation(json_path)?;
    let teeth = doc.validate(json_path)?;
    let img_path = image_path(json_path, &doc.image);
    let image = image::open(&img_path).map_err(|source| DataError::Image { path: img_path.clone(), source })?.into_luma8();
    if image.dimensions() != (CANVAS_W, CANVAS_H) {
        return Err(DataError::Field {
            path: img_path,
            field: "image".into(),
            message: format!("expected 768x512 pixels, got {:?}", image.dimensions()),
        });
    }
    Ok(Scene { image, teeth })
}

/// Write the annotation to `json_path` and the image to `image_rel`,
/// resolved against the annotation's directory.
pub fn save_scene(scene: &Scene, json_path: &Path, image_rel: &str) -> Result<()> {
    let img_path = image_path(json_path, image_rel);
    if let Some(dir) = img_path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    scene.image.save(&img_path).map_err(|source| DataError::Image { path: img_path.clone(), source })?;
    write_annotation(json_path, &AnnotationFile::from_teeth(image_rel, &scene.teeth, false))
}

/// Train/val/test fractions; they are normalised before use.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    /// The 574/162/82 proportions of the clinical dataset.
    fn default() -> Self {
        Self { train: 574.0 / 818.0, val: 162.0 / 818.0, test: 82.0 / 818.0 }
    }
}

impl SplitFractions {
    /// Largest-remainder apportionment of `n` items. Ties go to the earlier
    /// split.
    pub fn counts(&self, n: usize) -> Result<[usize; 3]> {
        let f = [self.train, self.val, self.test];
        let total: f64 = f.iter().sum();
        if f.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) || total <= 0.0 {
            return Err(DataError::Config(format!("bad split fractions {f:?}")));
        }
        let quota = f.map(|v| v / total * n as f64);
        let mut counts = quota.map(|q| q.floor() as usize);
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| {
            let (ra, rb) = (quota[a] - quota[a].floor(), quota[b] - quota[b].floor());
            rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
        });
        let short = n - counts.iter().sum::<usize>();
        for &i in order.iter().take(short) {
            counts[i] += 1;
        }
        Ok(counts)
    }
}

/// Dataset index: scene stems per split, relative to `annotations/`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetManifest {
    pub const FILE: &'static str = "manifest.json";

    /// Consecutive assignment of `stems` to the three splits.
    pub fn split(stems: Vec<String>, fractions: &SplitFractions) -> Result<Self> {
        let [a, b, _] = fractions.counts(stems.len())?;
        let mut it = stems.into_iter();
        let train = it.by_ref().take(a).collect();
        let val = it.by_ref().take(b).collect();
        let test = it.collect();
        Ok(Self { version: ANNOTATION_VERSION, train, val, test })
    }

    pub fn split_named(&self, name: &str) -> Option<&[String]> {
        match name {
            "train" => Some(&self.train),
            "val" => Some(&self.val),
            "test" => Some(&self.test),
            _ => None,
        }
    }

    pub fn annotation_path(root: &Path, stem: &str) -> PathBuf {
        root.join("annotations").join(format!("{stem}.json"))
    }

    pub fn image_rel(stem: &str) -> String {
        format!("../images/{stem}.png")
    }

    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(Self::FILE);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text).map_err(|e| DataError::Parse {
            path: path.clone(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        let path = root.join(Self::FILE);
        fs::create_dir_all(root).map_err(io_err(root))?;
        fs::write(&path, serde_json::to_string_pretty(self).expect("manifest serializes") + "\n").map_err(io_err(&path))
    }

    /// Load every scene of one split.
    pub fn load_split(&self, root: &Path, name: &str) -> Result<Vec<Scene>> {
        let stems = self.split_named(name).ok_or_else(|| DataError::Config(format!("unknown split `{name}`")))?;
        stems.iter().map(|s| load_scene(&Self::annotation_path(root, s))).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_split_counts() {
        assert_eq!(SplitFractions::default().counts(818).unwrap(), [574, 162, 82]);
        assert_eq!(SplitFractions::default().counts(10).unwrap().iter().sum::<usize>(), 10);
        let even = SplitFractions { train: 1.0, val: 1.0, test: 1.0 };
        assert_eq!(even.counts(4).unwrap(), [2, 1, 1]);
    }
}
