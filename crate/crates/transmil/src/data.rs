//! Synthetic witness bags and everything that touches disk: the binary bag
//! format, dataset manifests, patient-aware splits, and heat-map exports.
//!
//! Bags are generated around two unit-variance Gaussians `cluster_separation`
//! apart along the first feature axis. A negative bag draws every instance
//! from the background; a positive bag swaps `⌈witness_rate·n⌉` instances to
//! the witness distribution — optionally as one contiguous block of instance
//! indices, which is a contiguous region of the `⌈√n⌉` grid the model lays
//! tokens out on. Features are rounded through `f32` at generation time so a
//! disk round trip is the identity.
//!
//! Bag file layout (integers little-endian):
//!
//! ```text
//! "MILB" | version u32 | n u32 | d u32 | label u32
//! | id length u32 | id UTF-8 | n·d f32, row-major
//! ```
//!
//! Manifests are plain CSV, `path,label,patient_id,split` with LF endings;
//! fields must not contain commas. Splits are assigned per patient, never
//! per bag.

use std::fmt;
use std::fs;
use std::io;
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::mil::{bag_label_rule, Bag, MilError};
use crate::model::Heatmap;
use crate::tensor::Tensor;

pub const BAG_MAGIC: [u8; 4] = *b"MILB";
pub const BAG_VERSION: u32 = 1;
pub const MANIFEST_HEADER: &str = "path,label,patient_id,split";

#[derive(Debug)]
pub enum DataError {
    Io { path: PathBuf, source: io::Error },
    /// Malformed bag file; `offset` is the failing byte position.
    Format { path: PathBuf, offset: usize, why: String },
    /// Malformed manifest; `line` is 1-based (line 1 is the header).
    Manifest { path: PathBuf, line: usize, why: String },
    /// Invalid generator configuration; names the offending field.
    Config { field: &'static str, why: String },
    /// Split request that cannot be honoured.
    Split { why: String },
    Mil(MilError),
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataError::Io { path, source } => write!(f, "{}: {source}", path.display()),
            DataError::Format { path, offset, why } => {
                write!(f, "{}: malformed bag at byte {offset}: {why}", path.display())
            }
            DataError::Manifest { path, line, why } => {
                write!(f, "{}:{line}: {why}", path.display())
            }
            DataError::Config { field, why } => write!(f, "invalid {field}: {why}"),
            DataError::Split { why } => write!(f, "cannot split dataset: {why}"),
            DataError::Mil(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for DataError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            DataError::Io { source, .. } => Some(source),
            DataError::Mil(e) => Some(e),
            _ => None,
        }
    }
}

impl From<MilError> for DataError {
    fn from(e: MilError) -> Self {
        DataError::Mil(e)
    }
}

fn io_err(path: &Path, source: io::Error) -> DataError {
    DataError::Io { path: path.to_path_buf(), source }
}

/// Everything that determines a synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub bag_count: usize,
    pub instances_per_bag: RangeInclusive<usize>,
    pub feature_dim: usize,
    pub class_count: usize,
    /// Fraction of instances in a positive bag drawn from the witness
    /// distribution; the count is `⌈witness_rate·n⌉`.
    pub witness_rate: f64,
    /// Euclidean distance between the background and witness centroids.
    pub cluster_separation: f64,
    /// Place witnesses as one contiguous block of instance indices, i.e. a
    /// contiguous region of the token grid.
    pub spatial_clustering: bool,
    pub seed: u64,
}

impl SyntheticConfig {
    /// Sparse witnesses in a localised block: roughly one instance in ten
    /// carries signal.
    pub fn camelyon_like(seed: u64) -> SyntheticConfig {
        SyntheticConfig {
            bag_count: 200,
            instances_per_bag: 80..=120,
            feature_dim: 32,
            class_count: 2,
            witness_rate: 0.1,
            cluster_separation: 3.0,
            spatial_clustering: true,
            seed,
        }
    }

    /// Witness-dominated bags: most instances carry signal, scattered.
    pub fn tcga_like(seed: u64) -> SyntheticConfig {
        SyntheticConfig {
            bag_count: 200,
            instances_per_bag: 80..=120,
            feature_dim: 32,
            class_count: 2,
            witness_rate: 0.8,
            cluster_separation: 3.0,
            spatial_clustering: false,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let err = |field, why: String| Err(DataError::Config { field, why });
        if self.bag_count < 4 {
            return err("bag_count", format!("need at least 4 bags, got {}", self.bag_count));
        }
        let (lo, hi) = (*self.instances_per_bag.start(), *self.instances_per_bag.end());
        if lo == 0 || lo > hi {
            return err("instances_per_bag", format!("range {lo}..={hi} is empty or starts at zero"));
        }
        if self.feature_dim == 0 {
            return err("feature_dim", "must be positive".to_string());
        }
        if self.class_count != 2 {
            return err(
                "class_count",
                format!("the witness rule is binary; got {} classes", self.class_count),
            );
        }
        if !(self.witness_rate > 0.0 && self.witness_rate <= 1.0) {
            return err("witness_rate", format!("must lie in (0, 1], got {}", self.witness_rate));
        }
        if !(self.cluster_separation > 0.0) {
            return err(
                "cluster_separation",
                format!("must be positive, got {}", self.cluster_separation),
            );
        }
        Ok(())
    }
}

/// A generated bag plus the ground truth that training must never see.
#[derive(Debug, Clone)]
pub struct GeneratedBag {
    pub bag: Bag,
    /// 1 where the instance came from the witness distribution.
    pub instance_labels: Vec<u8>,
}

/// Deterministically generates `cfg.bag_count` bags. Per bag the draw order
/// is: instance count, bag class, witness placement, then features row by
/// row, so outputs are reproducible byte for byte.
pub fn generate_synthetic_dataset(cfg: &SyntheticConfig) -> Result<Vec<GeneratedBag>, DataError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.feature_dim;
    let mut out = Vec::with_capacity(cfg.bag_count);
    for index in 0..cfg.bag_count {
        let n = rng.random_range(cfg.instances_per_bag.clone());
        let positive = rng.random_bool(0.5);

        let mut instance_labels = vec![0u8; n];
        if positive {
            let witnesses = (cfg.witness_rate * n as f64).ceil() as usize;
            if cfg.spatial_clustering {
                let start = rng.random_range(0..=n - witnesses);
                for l in &mut instance_labels[start..start + witnesses] {
                    *l = 1;
                }
            } else {
                let mut order: Vec<usize> = (0..n).collect();
                order.shuffle(&mut rng);
                for &i in &order[..witnesses] {
                    instance_labels[i] = 1;
                }
            }
        }

        let mut features = Vec::with_capacity(n * d);
        for &label in &instance_labels {
            for j in 0..d {
                let mut x: f64 = rng.sample(StandardNormal);
                if label == 1 && j == 0 {
                    x += cfg.cluster_separation;
                }
                // Disk stores f32; round now so a round trip is the identity.
                features.push(x as f32 as f64);
            }
        }

        let label = bag_label_rule(&instance_labels)? as usize;
        let bag = Bag::new(
            Tensor::from_vec(&[n, d], features).map_err(MilError::Tensor)?,
            label,
            format!("P{index:04}"),
        )?;
        out.push(GeneratedBag { bag, instance_labels });
    }
    Ok(out)
}

/// Serialises one bag; see the module docs for the layout.
pub fn write_bag(bag: &Bag, path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    let (n, d) = (bag.instances.shape()[0], bag.instances.shape()[1]);
    let mut out = Vec::with_capacity(24 + bag.id.len() + n * d * 4);
    out.extend_from_slice(&BAG_MAGIC);
    out.extend_from_slice(&BAG_VERSION.to_le_bytes());
    for v in [n, d, bag.label, bag.id.len()] {
        let v = u32::try_from(v).expect("bag field exceeds the file format");
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(bag.id.as_bytes());
    for &x in bag.instances.data() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    fs::write(path, out).map_err(|e| io_err(path, e))
}

struct BagReader<'a> {
    path: &'a Path,
    buf: &'a [u8],
    pos: usize,
}

impl<'a> BagReader<'a> {
    fn bad(&self, offset: usize, why: String) -> DataError {
        DataError::Format { path: self.path.to_path_buf(), offset, why }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], DataError> {
        if self.pos + n > self.buf.len() {
            return Err(self.bad(self.pos, format!("file ends inside {what}")));
        }
        let piece = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(piece)
    }

    fn u32(&mut self, what: &str) -> Result<usize, DataError> {
        let bytes = self.take(4, what)?;
        Ok(u32::from_le_bytes(bytes.try_into().unwrap()) as usize)
    }
}

/// Reads a bag back; the inverse of [`write_bag`] on valid files.
pub fn read_bag(path: impl AsRef<Path>) -> Result<Bag, DataError> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| io_err(path, e))?;
    let mut r = BagReader { path, buf: &buf, pos: 0 };

    let magic = r.take(4, "magic")?;
    if magic != BAG_MAGIC {
        return Err(r.bad(0, format!("bad magic {magic:?}, expected {BAG_MAGIC:?}")));
    }
    let version = r.u32("version")?;
    if version != BAG_VERSION as usize {
        return Err(r.bad(4, format!("unsupported version {version}, expected {BAG_VERSION}")));
    }
    let n = r.u32("instance count")?;
    let d = r.u32("feature width")?;
    let label = r.u32("label")?;
    let id_len = r.u32("id length")?;
    if n == 0 || d == 0 {
        return Err(r.bad(8, format!("bag must be at least 1×1, got {n}×{d}")));
    }
    let id_at = r.pos;
    let id = std::str::from_utf8(r.take(id_len, "id")?)
        .map_err(|e| r.bad(id_at, format!("id is not UTF-8: {e}")))?
        .to_string();

    let payload_at = r.pos;
    let payload = r.take(n * d * 4, "feature payload")?;
    let features: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    if r.pos != buf.len() {
        return Err(r.bad(r.pos, format!("{} trailing bytes after the payload", buf.len() - r.pos)));
    }

    let instances = Tensor::from_vec(&[n, d], features)
        .map_err(|e| r.bad(payload_at, format!("payload rejected: {e}")))?;
    Ok(Bag::new(instances, label, id)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Split, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}, expected train|val|test")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    /// Bag file path, relative to the manifest's directory.
    pub path: String,
    pub label: usize,
    pub patient: String,
    pub split: Split,
}

/// The dataset index: one record per bag file.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn of_split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), DataError> {
        let path = path.as_ref();
        let mut out = String::from(MANIFEST_HEADER);
        out.push('\n');
        for (i, r) in self.records.iter().enumerate() {
            for (field, value) in [("path", &r.path), ("patient_id", &r.patient)] {
                if value.contains(',') || value.contains('\n') {
                    return Err(DataError::Manifest {
                        path: path.to_path_buf(),
                        line: i + 2,
                        why: format!("{field} {value:?} contains a comma or newline"),
                    });
                }
            }
            out.push_str(&format!("{},{},{},{}\n", r.path, r.label, r.patient, r.split));
        }
        fs::write(path, out).map_err(|e| io_err(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Manifest, DataError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let bad = |line: usize, why: String| DataError::Manifest { path: path.to_path_buf(), line, why };

        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, header)) if header == MANIFEST_HEADER => {}
            Some((_, header)) => {
                return Err(bad(1, format!("bad header {header:?}, expected {MANIFEST_HEADER:?}")));
            }
            None => return Err(bad(1, "empty manifest".to_string())),
        }

        let mut records = Vec::new();
        for (idx, line) in lines {
            let lineno = idx + 1;
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 4 {
                return Err(bad(lineno, format!("expected 4 fields, got {}", fields.len())));
            }
            let label: usize = fields[1]
                .parse()
                .map_err(|e| bad(lineno, format!("bad label {:?}: {e}", fields[1])))?;
            let split: Split = fields[3].parse().map_err(|e| bad(lineno, e))?;
            records.push(ManifestRecord {
                path: fields[0].to_string(),
                label,
                patient: fields[2].to_string(),
                split,
            });
        }
        Ok(Manifest { records })
    }
}

/// Reassigns every record's split, atomically per patient: patients are
/// shuffled (seeded) and cut at the cumulative ratio boundaries, so each
/// split's patient count is within one of its target.
pub fn split_dataset(
    manifest: &mut Manifest,
    ratios: [f64; 3],
    seed: u64,
) -> Result<(), DataError> {
    if ratios.iter().any(|&r| r <= 0.0) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(DataError::Config {
            field: "ratios",
            why: format!("must be positive and sum to 1, got {ratios:?}"),
        });
    }
    let mut patients: Vec<&str> = Vec::new();
    for r in &manifest.records {
        if !patients.contains(&r.patient.as_str()) {
            patients.push(&r.patient);
        }
    }
    if patients.len() < 3 {
        return Err(DataError::Split {
            why: format!("{} patients cannot cover 3 splits", patients.len()),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    patients.shuffle(&mut rng);
    let p = patients.len() as f64;
    let cut1 = (ratios[0] * p).round() as usize;
    let cut2 = ((ratios[0] + ratios[1]) * p).round() as usize;

    let assignment: Vec<(String, Split)> = patients
        .iter()
        .enumerate()
        .map(|(i, &pat)| {
            let split = if i < cut1 {
                Split::Train
            } else if i < cut2 {
                Split::Val
            } else {
                Split::Test
            };
            (pat.to_string(), split)
        })
        .collect();
    for record in &mut manifest.records {
        record.split = assignment
            .iter()
            .find(|(pat, _)| *pat == record.patient)
            .map(|(_, s)| *s)
            .expect("every record's patient was collected");
    }
    Ok(())
}

/// Writes `bags` as `bag_NNNN.milb` files plus a split `manifest.csv`
/// under `dir`, and returns the manifest.
pub fn write_dataset(
    bags: &[GeneratedBag],
    dir: impl AsRef<Path>,
    ratios: [f64; 3],
    split_seed: u64,
) -> Result<Manifest, DataError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut manifest = Manifest::default();
    for (i, g) in bags.iter().enumerate() {
        let name = format!("bag_{i:04}.milb");
        write_bag(&g.bag, dir.join(&name))?;
        manifest.records.push(ManifestRecord {
            path: name,
            label: g.bag.label,
            patient: g.bag.id.clone(),
            split: Split::Train,
        });
    }
    split_dataset(&mut manifest, ratios, split_seed)?;
    manifest.write(dir.join("manifest.csv"))?;
    Ok(manifest)
}

/// Loads every bag of one split, cross-checking file contents against the
/// manifest row.
pub fn load_bags(manifest: &Manifest, root: impl AsRef<Path>, split: Split) -> Result<Vec<Bag>, DataError> {
    let root = root.as_ref();
    let mut out = Vec::new();
    for record in manifest.of_split(split) {
        let path = root.join(&record.path);
        let bag = read_bag(&path)?;
        if bag.label != record.label || bag.id != record.patient {
            return Err(DataError::Format {
                path,
                offset: 16,
                why: format!(
                    "bag says label={} id={:?} but the manifest says label={} patient={:?}",
                    bag.label, bag.id, record.label, record.patient
                ),
            });
        }
        out.push(bag);
    }
    Ok(out)
}

/// Writes `instance,row,col,score` rows, one per instance, with the
/// instance's grid position.
pub fn write_heatmap_csv(map: &Heatmap, path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    let mut out = String::from("instance,row,col,score\n");
    for (i, s) in map.scores.iter().enumerate() {
        out.push_str(&format!("{i},{},{},{s}\n", i / map.side, i % map.side));
    }
    fs::write(path, out).map_err(|e| io_err(path, e))
}

/// Renders the score grid as a plain-text PGM (`P2`, maxval 255): scores
/// scale to 0–255 rounded half-up; grid cells past the last instance are 0.
pub fn write_heatmap_pgm(map: &Heatmap, path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    let mut out = format!("P2\n{} {}\n255\n", map.side, map.side);
    for row in 0..map.side {
        let cells: Vec<String> = (0..map.side)
            .map(|col| {
                let i = row * map.side + col;
                let level = match map.scores.get(i) {
                    Some(&s) => (s * 255.0).round() as u32,
                    None => 0,
                };
                level.to_string()
            })
            .collect();
        out.push_str(&cells.join(" "));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| io_err(path, e))
}
