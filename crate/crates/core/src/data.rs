//! Paired feature datasets: file formats, synthetic generation and splits.
//!
//! Feature files: `UCHFEAT1`, `n`, `dim` (u32 LE), then `n * dim` f32 LE
//! values row-major. Label files: `UCHLAB1`, `n`, `L` (u32 LE), then per
//! item `ceil(L / 8)` bytes with label `j` at bit `j % 8` of byte `j / 8`
//! (zero padding). Both also load from headerless comma-separated text when
//! the path ends in `.csv`.

use std::io::{BufRead, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::codec::{self, malformed, read_err};
use crate::error::{Error, Result};
use crate::ndcore::Matrix;

const FEATURE_MAGIC: &[u8; 8] = b"UCHFEAT1";
const LABEL_MAGIC: &[u8; 7] = b"UCHLAB1";

/// Multi-hot labels, one bit per class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMatrix {
    n: usize,
    classes: usize,
    words: Vec<u64>,
}

impl LabelMatrix {
    fn wpi(&self) -> usize {
        self.classes.div_ceil(64)
    }

    pub fn from_rows<R: AsRef<[bool]>>(rows: &[R]) -> Result<Self> {
        let classes = rows.first().map_or(0, |r| r.as_ref().len());
        let mut m = Self {
            n: rows.len(),
            classes,
            words: vec![0; rows.len() * classes.div_ceil(64)],
        };
        let wpi = m.wpi();
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != classes {
                return Err(Error::Data(format!(
                    "label row {i} has {} classes, expected {classes}",
                    r.len()
                )));
            }
            for (c, &on) in r.iter().enumerate() {
                if on {
                    m.words[i * wpi + c / 64] |= 1 << (c % 64);
                }
            }
        }
        Ok(m)
    }

    /// One-hot rows from class ids.
    pub fn one_hot(ids: &[usize], classes: usize) -> Result<Self> {
        let rows: Vec<Vec<bool>> = ids
            .iter()
            .map(|&id| (0..classes).map(|c| c == id).collect())
            .collect();
        if let Some(&bad) = ids.iter().find(|&&id| id >= classes) {
            return Err(Error::Data(format!("class id {bad} >= {classes}")));
        }
        let mut m = Self::from_rows(&rows)?;
        m.classes = classes;
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, i: usize, class: usize) -> bool {
        self.words[i * self.wpi() + class / 64] >> (class % 64) & 1 == 1
    }

    fn item(&self, i: usize) -> &[u64] {
        let wpi = self.wpi();
        &self.words[i * wpi..(i + 1) * wpi]
    }

    pub fn has_any(&self, i: usize) -> bool {
        self.item(i).iter().any(|&w| w != 0)
    }

    /// True when item `i` and item `j` of `other` share an active label.
    pub fn shares_label(&self, i: usize, other: &LabelMatrix, j: usize) -> bool {
        self.item(i)
            .iter()
            .zip(other.item(j))
            .any(|(a, b)| a & b != 0)
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        let mut words = Vec::with_capacity(indices.len() * self.wpi());
        for &i in indices {
            words.extend_from_slice(self.item(i));
        }
        Self {
            n: indices.len(),
            classes: self.classes,
            words,
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let io = |e| Error::Io {
            path: Default::default(),
            source: e,
        };
        w.write_all(LABEL_MAGIC).map_err(io)?;
        codec::write_u32(w, codec::count(self.n, "item count")?).map_err(io)?;
        codec::write_u32(w, codec::count(self.classes, "label count")?).map_err(io)?;
        let bytes_per = self.classes.div_ceil(8);
        let mut buf = vec![0u8; bytes_per];
        for i in 0..self.n {
            buf.fill(0);
            for c in 0..self.classes {
                if self.get(i, c) {
                    buf[c / 8] |= 1 << (c % 8);
                }
            }
            w.write_all(&buf).map_err(io)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        const KIND: &str = "label";
        let rd = read_err(KIND);
        if !codec::expect_magic(r, LABEL_MAGIC).map_err(&rd)? {
            return Err(malformed(KIND, "bad magic"));
        }
        let n = codec::read_u32(r).map_err(&rd)? as usize;
        let classes = codec::read_u32(r).map_err(&rd)? as usize;
        let bytes_per = classes.div_ceil(8);
        let mut buf = vec![0u8; bytes_per];
        let mut rows = Vec::with_capacity(n.min(1 << 20));
        for i in 0..n {
            r.read_exact(&mut buf).map_err(&rd)?;
            let row: Vec<bool> = (0..classes)
                .map(|c| buf[c / 8] >> (c % 8) & 1 == 1)
                .collect();
            if !classes.is_multiple_of(8) && buf[bytes_per - 1] >> (classes % 8) != 0 {
                return Err(malformed(KIND, format!("nonzero padding bits in item {i}")));
            }
            rows.push(row);
        }
        let mut probe = [0u8; 1];
        if r.read(&mut probe).map_err(&rd)? != 0 {
            return Err(malformed(KIND, "trailing bytes"));
        }
        let mut m = Self::from_rows(&rows)?;
        m.classes = classes;
        if m.words.len() != n * classes.div_ceil(64) {
            m.words = vec![0; n * classes.div_ceil(64)];
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = codec::create(path)?;
        self.write_to(&mut w)
            .and_then(|_| w.flush().map_err(codec::io_err(path)))
            .map_err(|e| codec::at_path(e, "label", path))
    }

    /// Binary format, or 0/1 CSV when the path ends in `.csv`.
    pub fn load(path: &Path) -> Result<Self> {
        if is_csv(path) {
            let m = read_csv(path)?;
            let rows: Vec<Vec<bool>> = (0..m.rows())
                .map(|i| m.row(i).iter().map(|&v| v != 0.0).collect())
                .collect();
            return Self::from_rows(&rows);
        }
        let mut r = codec::open(path)?;
        Self::read_from(&mut r).map_err(|e| codec::at_path(e, "label", path))
    }
}

fn is_csv(path: &Path) -> bool {
    path.extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

fn read_csv(path: &Path) -> Result<Matrix> {
    let r = codec::open(path)?;
    let mut values = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (line_no, line) in r.lines().enumerate() {
        let line = line.map_err(codec::io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let before = values.len();
        for field in line.split(',') {
            let v: f64 = field.trim().parse().map_err(|_| Error::Format {
                kind: "csv",
                path: path.to_path_buf(),
                reason: format!("line {}: cannot parse {field:?}", line_no + 1),
            })?;
            values.push(v);
        }
        let width = values.len() - before;
        match cols {
            None => cols = Some(width),
            Some(c) if c != width => {
                return Err(Error::Format {
                    kind: "csv",
                    path: path.to_path_buf(),
                    reason: format!("line {} has {width} fields, expected {c}", line_no + 1),
                })
            }
            _ => {}
        }
        rows += 1;
    }
    Matrix::new(rows, cols.unwrap_or(0), values)
}

pub fn write_features(m: &Matrix, w: &mut impl Write) -> Result<()> {
    let io = |e| Error::Io {
        path: Default::default(),
        source: e,
    };
    w.write_all(FEATURE_MAGIC).map_err(io)?;
    codec::write_u32(w, codec::count(m.rows(), "item count")?).map_err(io)?;
    codec::write_u32(w, codec::count(m.cols(), "feature width")?).map_err(io)?;
    for &v in m.as_slice() {
        codec::write_f32(w, v).map_err(io)?;
    }
    Ok(())
}

pub fn read_features(r: &mut impl Read) -> Result<Matrix> {
    const KIND: &str = "feature";
    let rd = read_err(KIND);
    if !codec::expect_magic(r, FEATURE_MAGIC).map_err(&rd)? {
        return Err(malformed(KIND, "bad magic"));
    }
    let n = codec::read_u32(r).map_err(&rd)? as usize;
    let dim = codec::read_u32(r).map_err(&rd)? as usize;
    let mut values = Vec::with_capacity((n * dim).min(1 << 26));
    for _ in 0..n * dim {
        values.push(codec::read_f32(r).map_err(&rd)?);
    }
    let mut probe = [0u8; 1];
    if r.read(&mut probe).map_err(&rd)? != 0 {
        return Err(malformed(KIND, "trailing bytes"));
    }
    Matrix::new(n, dim, values)
}

pub fn save_features(m: &Matrix, path: &Path) -> Result<()> {
    let mut w = codec::create(path)?;
    write_features(m, &mut w)
        .and_then(|_| w.flush().map_err(codec::io_err(path)))
        .map_err(|e| codec::at_path(e, "feature", path))
}

/// Binary format, or CSV when the path ends in `.csv`.
pub fn load_features(path: &Path) -> Result<Matrix> {
    if is_csv(path) {
        return read_csv(path);
    }
    let mut r = codec::open(path)?;
    read_features(&mut r).map_err(|e| codec::at_path(e, "feature", path))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitTag {
    Query,
    Retrieval,
}

/// Aligned image and text features with optional multi-hot labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedDataset {
    images: Matrix,
    texts: Matrix,
    labels: Option<LabelMatrix>,
    tags: Vec<SplitTag>,
}

fn check_finite(m: &Matrix, what: &str) -> Result<()> {
    match m.first_non_finite() {
        Some((row, col)) => Err(Error::Data(format!(
            "non-finite {what} value at row {row}, col {col}"
        ))),
        None => Ok(()),
    }
}

impl PairedDataset {
    /// Validates counts, finiteness and that every item has a label. All
    /// items start tagged [`SplitTag::Retrieval`].
    pub fn new(images: Matrix, texts: Matrix, labels: Option<LabelMatrix>) -> Result<Self> {
        if images.rows() != texts.rows() {
            return Err(Error::Data(format!(
                "{} images but {} texts",
                images.rows(),
                texts.rows()
            )));
        }
        check_finite(&images, "image")?;
        check_finite(&texts, "text")?;
        if let Some(l) = &labels {
            if l.len() != images.rows() {
                return Err(Error::Data(format!(
                    "{} labels for {} items",
                    l.len(),
                    images.rows()
                )));
            }
            if let Some(i) = (0..l.len()).find(|&i| !l.has_any(i)) {
                return Err(Error::Data(format!("item {i} has no active label")));
            }
        }
        let n = images.rows();
        Ok(Self {
            images,
            texts,
            labels,
            tags: vec![SplitTag::Retrieval; n],
        })
    }

    pub fn len(&self) -> usize {
        self.images.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn images(&self) -> &Matrix {
        &self.images
    }

    pub fn texts(&self) -> &Matrix {
        &self.texts
    }

    pub fn labels(&self) -> Option<&LabelMatrix> {
        self.labels.as_ref()
    }

    pub fn tags(&self) -> &[SplitTag] {
        &self.tags
    }

    pub fn indices_tagged(&self, tag: SplitTag) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.tags[i] == tag).collect()
    }

    /// Items at `indices`, in that order, all tagged retrieval.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            images: self.images.select_rows(indices),
            texts: self.texts.select_rows(indices),
            labels: self.labels.as_ref().map(|l| l.select(indices)),
            tags: vec![SplitTag::Retrieval; indices.len()],
        }
    }

    /// Tags `query_count` uniformly chosen items as queries, the rest as
    /// retrieval items (which also form the training set).
    pub fn split(mut self, query_count: usize, seed: u64) -> Result<Self> {
        let s = split_indices(self.len(), query_count, seed)?;
        self.tags = vec![SplitTag::Retrieval; self.len()];
        for i in s.query {
            self.tags[i] = SplitTag::Query;
        }
        Ok(self)
    }

    pub fn save(&self, images: &Path, texts: &Path, labels: Option<&Path>) -> Result<()> {
        save_features(&self.images, images)?;
        save_features(&self.texts, texts)?;
        if let (Some(path), Some(l)) = (labels, &self.labels) {
            l.save(path)?;
        }
        Ok(())
    }
}

/// Result of [`load_dataset`].
#[derive(Clone, Debug)]
pub struct LoadedDataset {
    pub dataset: PairedDataset,
    /// Original indices of items dropped for having no active label.
    pub pruned: Vec<usize>,
}

/// Reads image/text features (and labels). Items without any label are
/// dropped and reported in [`LoadedDataset::pruned`].
pub fn load_dataset(images: &Path, texts: &Path, labels: Option<&Path>) -> Result<LoadedDataset> {
    let im = load_features(images)?;
    let tx = load_features(texts)?;
    if im.rows() != tx.rows() {
        return Err(Error::Data(format!(
            "item count mismatch: {} has {}, {} has {}",
            images.display(),
            im.rows(),
            texts.display(),
            tx.rows()
        )));
    }
    let Some(lpath) = labels else {
        return Ok(LoadedDataset {
            dataset: PairedDataset::new(im, tx, None)?,
            pruned: Vec::new(),
        });
    };
    let lab = LabelMatrix::load(lpath)?;
    if lab.len() != im.rows() {
        return Err(Error::Data(format!(
            "item count mismatch: {} has {}, {} has {}",
            images.display(),
            im.rows(),
            lpath.display(),
            lab.len()
        )));
    }
    let (keep, pruned): (Vec<usize>, Vec<usize>) = (0..lab.len()).partition(|&i| lab.has_any(i));
    let (im, tx, lab) = if pruned.is_empty() {
        (im, tx, lab)
    } else {
        (
            im.select_rows(&keep),
            tx.select_rows(&keep),
            lab.select(&keep),
        )
    };
    Ok(LoadedDataset {
        dataset: PairedDataset::new(im, tx, Some(lab))?,
        pruned,
    })
}

/// Query/retrieval index sets, each ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub query: Vec<usize>,
    pub retrieval: Vec<usize>,
}

pub fn split_indices(n: usize, query_count: usize, seed: u64) -> Result<Split> {
    if query_count >= n && query_count > 0 {
        return Err(Error::contract(format!(
            "query count {query_count} must be below the item count {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut query = rand::seq::index::sample(&mut rng, n, query_count).into_vec();
    query.sort_unstable();
    let mut is_query = vec![false; n];
    for &i in &query {
        is_query[i] = true;
    }
    let retrieval = (0..n).filter(|&i| !is_query[i]).collect();
    Ok(Split { query, retrieval })
}

/// Parameters of the clustered paired-data generator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub clusters: usize,
    pub pairs_per_cluster: usize,
    pub image_dim: usize,
    pub text_dim: usize,
    /// Per-coordinate Gaussian noise around the cluster anchor.
    pub noise: f64,
    /// Fraction of pairs whose text comes from a different cluster.
    pub misalignment: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.clusters < 2 {
            return Err(Error::contract("at least two clusters are required"));
        }
        if self.pairs_per_cluster == 0 || self.image_dim == 0 || self.text_dim == 0 {
            return Err(Error::contract(
                "pair count and dimensions must be positive",
            ));
        }
        if self.noise.is_nan() || self.noise <= 0.0 || !self.noise.is_finite() {
            return Err(Error::contract(format!(
                "noise sigma must be > 0, got {}",
                self.noise
            )));
        }
        if !(0.0..=1.0).contains(&self.misalignment) {
            return Err(Error::contract(format!(
                "misalignment must be in [0, 1], got {}",
                self.misalignment
            )));
        }
        Ok(())
    }
}

/// Generated data plus the ground truth behind it.
#[derive(Clone, Debug)]
pub struct Synthetic {
    pub dataset: PairedDataset,
    /// Unit-norm anchors, one row per cluster.
    pub image_anchors: Matrix,
    pub text_anchors: Matrix,
    /// Cluster of each item's image (also its label).
    pub image_cluster: Vec<usize>,
    /// Cluster whose anchor produced each item's text.
    pub text_cluster: Vec<usize>,
}

fn unit_anchors(rng: &mut ChaCha8Rng, k: usize, dim: usize) -> Result<Matrix> {
    let mut values = Vec::with_capacity(k * dim);
    for _ in 0..k {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v
            .iter()
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
            .max(f64::MIN_POSITIVE);
        values.extend(v.into_iter().map(|x| x / norm));
    }
    Matrix::new(k, dim, values)
}

/// Clustered paired data. Items are cluster-major; values are rounded to
/// f32 so a write/read cycle is lossless.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Synthetic> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let image_anchors = unit_anchors(&mut rng, spec.clusters, spec.image_dim)?;
    let text_anchors = unit_anchors(&mut rng, spec.clusters, spec.text_dim)?;
    let n = spec.clusters * spec.pairs_per_cluster;
    let image_cluster: Vec<usize> = (0..n).map(|i| i / spec.pairs_per_cluster).collect();

    let noisy_count = (spec.misalignment * n as f64).round() as usize;
    let mut text_cluster = image_cluster.clone();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    for &i in &order[..noisy_count] {
        let other = rng.random_range(0..spec.clusters - 1);
        text_cluster[i] = if other >= image_cluster[i] {
            other + 1
        } else {
            other
        };
    }

    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::contract(e.to_string()))?;
    let mut draw = |anchors: &Matrix, clusters: &[usize], dim: usize| {
        let mut values = Vec::with_capacity(n * dim);
        for &c in clusters {
            for &a in anchors.row(c) {
                values.push((a + noise.sample(&mut rng)) as f32 as f64);
            }
        }
        Matrix::new(n, dim, values)
    };
    let images = draw(&image_anchors, &image_cluster, spec.image_dim)?;
    let texts = draw(&text_anchors, &text_cluster, spec.text_dim)?;
    let labels = LabelMatrix::one_hot(&image_cluster, spec.clusters)?;
    Ok(Synthetic {
        dataset: PairedDataset::new(images, texts, Some(labels))?,
        image_anchors,
        text_anchors,
        image_cluster,
        text_cluster,
    })
}
