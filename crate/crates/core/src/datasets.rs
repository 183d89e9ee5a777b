//! Annotated image corpora and semi-supervised batch sampling.
//!
//! A dataset root holds `images/*.{png,jpg}` and an `attributes.txt`
//! annotation table. The table is a header naming the attributes followed by
//! one row per image, `filename v1 v2 ...`, separated by commas or
//! whitespace. A leading line holding only the row count (CelebA layout) is
//! skipped. Values may use `{-1, +1}` or `{0, 1}`; the latter is mapped to
//! `{-1, +1}` on load.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use crate::error::{Error, Result};
use crate::imageio;

pub const ANNOTATION_FILE: &str = "attributes.txt";
pub const IMAGE_DIR: &str = "images";

/// Presence (`+1`) or absence (`-1`) of each named attribute.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AttributeLabel(Vec<i8>);

impl AttributeLabel {
    pub fn new(values: Vec<i8>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| **v != 1 && **v != -1) {
            return Err(Error::Config(format!("attribute value {v} is not -1 or +1")));
        }
        Ok(Self(values))
    }

    /// Parses raw integers in either `{-1, +1}` or `{0, 1}` convention.
    pub fn from_raw(raw: &[i64]) -> Option<Self> {
        raw.iter()
            .map(|v| match v {
                1 => Some(1),
                0 | -1 => Some(-1),
                _ => None,
            })
            .collect::<Option<Vec<i8>>>()
            .map(Self)
    }

    /// `{0, 1}` encoding, the inverse of [`AttributeLabel::from_raw`] for binary input.
    pub fn to_binary(&self) -> Vec<u8> {
        self.0.iter().map(|v| u8::from(*v > 0)).collect()
    }

    pub fn values(&self) -> &[i8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_f32(&self) -> Vec<f32> {
        self.0.iter().map(|v| *v as f32).collect()
    }
}

/// Filename to label mapping restricted to a set of attribute columns,
/// in table order.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationIndex {
    pub names: Vec<String>,
    pub entries: Vec<(String, AttributeLabel)>,
}

impl AnnotationIndex {
    pub fn nd(&self) -> usize {
        self.names.len()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, filename: &str) -> Option<&AttributeLabel> {
        self.entries.iter().find(|(f, _)| f == filename).map(|(_, l)| l)
    }

    /// Writes the table in the comma separated layout read by
    /// [`load_annotation_table`].
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::from("filename");
        for n in &self.names {
            out.push(',');
            out.push_str(n);
        }
        out.push('\n');
        for (file, label) in &self.entries {
            out.push_str(file);
            for v in label.values() {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

fn tokens(line: &str) -> Vec<&str> {
    line.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .collect()
}

/// Reads an annotation table, keeping only `selected` columns (all columns
/// when `selected` is empty).
pub fn load_annotation_table(path: &Path, selected: &[String]) -> Result<AnnotationIndex> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingPath(path.to_path_buf()),
        _ => Error::io(path, e),
    })?;
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let mut header = lines
        .next()
        .ok_or_else(|| Error::Config(format!("{} is empty", path.display())))?;
    if tokens(header.1).len() == 1 && tokens(header.1)[0].parse::<u64>().is_ok() {
        header = lines
            .next()
            .ok_or_else(|| Error::Config(format!("{} has no header", path.display())))?;
    }
    let mut columns: Vec<String> = tokens(header.1).iter().map(|s| s.to_string()).collect();
    let rows: Vec<(usize, &str)> = lines.collect();
    // a header may or may not name the filename column
    if let Some((_, first)) = rows.first() {
        if tokens(first).len() == columns.len() {
            columns.remove(0);
        }
    }
    let wanted: Vec<String> = if selected.is_empty() {
        columns.clone()
    } else {
        selected.to_vec()
    };
    let positions = wanted
        .iter()
        .map(|name| {
            columns
                .iter()
                .position(|c| c == name)
                .ok_or_else(|| Error::Config(format!("annotation table has no column `{name}`")))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut entries = Vec::with_capacity(rows.len());
    for (lineno, line) in rows {
        let row = lineno + 1;
        let toks = tokens(line);
        let bad = |message: String| Error::Ingestion {
            path: path.to_path_buf(),
            row,
            message,
        };
        if toks.len() != columns.len() + 1 {
            return Err(bad(format!(
                "expected {} fields, found {}",
                columns.len() + 1,
                toks.len()
            )));
        }
        let raw = positions
            .iter()
            .map(|p| {
                toks[p + 1]
                    .parse::<i64>()
                    .map_err(|_| bad(format!("`{}` is not an integer", toks[p + 1])))
            })
            .collect::<Result<Vec<i64>>>()?;
        let label = AttributeLabel::from_raw(&raw)
            .ok_or_else(|| bad(format!("values {raw:?} are not in {{-1,+1}} or {{0,1}}")))?;
        entries.push((toks[0].to_string(), label));
    }
    Ok(AnnotationIndex {
        names: wanted,
        entries,
    })
}

/// Images held in memory as one `[N, C, H, W]` tensor in `[-1, 1]`, with
/// optional labels per image.
#[derive(Debug)]
pub struct Corpus {
    pub names: Vec<String>,
    pub files: Vec<String>,
    pub images: Tensor,
    pub labels: Vec<Option<AttributeLabel>>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.files.len()
    }

    pub fn is_empty(&self) -> bool {
        self.files.is_empty()
    }

    pub fn nd(&self) -> usize {
        self.names.len()
    }

    pub fn image_size(&self) -> i64 {
        self.images.size()[2]
    }

    /// Loads every image under `<root>/images`, attaching labels from
    /// `<root>/attributes.txt` where the table has a row for the file.
    pub fn load(root: &Path, selected: &[String], image_size: i64) -> Result<Self> {
        if !root.is_dir() {
            return Err(Error::MissingPath(root.to_path_buf()));
        }
        let image_dir = root.join(IMAGE_DIR);
        if !image_dir.is_dir() {
            return Err(Error::MissingPath(image_dir));
        }
        let index = load_annotation_table(&root.join(ANNOTATION_FILE), selected)?;
        let labels: BTreeMap<&str, &AttributeLabel> =
            index.entries.iter().map(|(f, l)| (f.as_str(), l)).collect();

        let mut files: Vec<String> = fs::read_dir(&image_dir)
            .map_err(|e| Error::io(&image_dir, e))?
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|f| {
                let lower = f.to_ascii_lowercase();
                lower.ends_with(".png") || lower.ends_with(".jpg") || lower.ends_with(".jpeg")
            })
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::Config(format!("no images in {}", image_dir.display())));
        }
        let mut tensors = Vec::with_capacity(files.len());
        for f in &files {
            tensors.push(imageio::load_image(&image_dir.join(f), image_size)?);
        }
        let file_labels = files.iter().map(|f| labels.get(f.as_str()).map(|l| (*l).clone())).collect();
        Ok(Self {
            names: index.names.clone(),
            files,
            images: Tensor::stack(&tensors, 0),
            labels: file_labels,
        })
    }

    /// Indices of images that carry labels.
    pub fn labeled_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|i| self.labels[*i].is_some()).collect()
    }

    pub fn label_tensor(&self, indices: &[usize]) -> Tensor {
        let nd = self.nd() as i64;
        let flat: Vec<f32> = indices
            .iter()
            .flat_map(|i| {
                self.labels[*i]
                    .as_ref()
                    .expect("labeled index")
                    .as_f32()
            })
            .collect();
        Tensor::from_slice(&flat).view([indices.len() as i64, nd])
    }

    pub fn select(&self, indices: &[usize]) -> Tensor {
        let idx: Vec<i64> = indices.iter().map(|i| *i as i64).collect();
        self.images.index_select(0, &Tensor::from_slice(&idx))
    }
}

/// Disjoint labeled and unlabeled index sets over a corpus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SemiSplit {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

/// Keeps labels on `round(fraction * annotated)` annotated images chosen by
/// a seeded shuffle; every other image becomes unlabeled. When no image is
/// left over the unlabeled stream reuses the labeled pool with labels stripped.
pub fn make_semi_split(corpus: &Corpus, labeled_fraction: f64, seed: u64) -> Result<SemiSplit> {
    split_indices(corpus.len(), &corpus.labeled_indices(), labeled_fraction, seed)
}

pub fn split_indices(total: usize, annotated: &[usize], labeled_fraction: f64, seed: u64) -> Result<SemiSplit> {
    if !(labeled_fraction > 0.0 && labeled_fraction <= 1.0) {
        return Err(Error::Config(format!(
            "labeled_fraction must be in (0, 1], got {labeled_fraction}"
        )));
    }
    let mut pool = annotated.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fisher-Yates
    for i in (1..pool.len()).rev() {
        let j = rng.random_range(0..=i);
        pool.swap(i, j);
    }
    let n_labeled = (labeled_fraction * pool.len() as f64).round() as usize;
    if n_labeled == 0 {
        return Err(Error::Config(format!(
            "labeled_fraction {labeled_fraction} leaves no labeled images out of {}",
            pool.len()
        )));
    }
    let mut labeled: Vec<usize> = pool[..n_labeled].to_vec();
    labeled.sort_unstable();
    let mut is_labeled = vec![false; total];
    for i in &labeled {
        is_labeled[*i] = true;
    }
    let mut unlabeled: Vec<usize> = (0..total).filter(|i| !is_labeled[*i]).collect();
    if unlabeled.is_empty() {
        unlabeled = labeled.clone();
    }
    Ok(SemiSplit { labeled, unlabeled })
}

/// One training batch: `B` labeled images with labels and `B` unlabeled images.
#[derive(Debug)]
pub struct SemiBatch {
    pub labeled: Tensor,
    pub labels: Tensor,
    pub unlabeled: Tensor,
}

impl SemiBatch {
    pub fn batch_size(&self) -> i64 {
        self.labeled.size()[0]
    }
}

/// Sampling state for the two streams. Draws are uniform with replacement
/// and every image is flipped horizontally with probability 0.5.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchSampler {
    rng: ChaCha8Rng,
    pub batch_size: usize,
    pub flip: bool,
}

impl BatchSampler {
    pub fn new(seed: u64, batch_size: usize) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            batch_size,
            flip: true,
        })
    }

    fn draw(&mut self, corpus: &Corpus, pool: &[usize]) -> (Vec<usize>, Tensor) {
        let picks: Vec<usize> = (0..self.batch_size)
            .map(|_| pool[self.rng.random_range(0..pool.len())])
            .collect();
        let flips: Vec<bool> = (0..self.batch_size)
            .map(|_| self.flip && self.rng.random_bool(0.5))
            .collect();
        let images = corpus.select(&picks);
        let flipped = images.flip([3]);
        let mask = Tensor::from_slice(&flips).view([-1, 1, 1, 1]);
        (picks, flipped.where_self(&mask, &images))
    }

    pub fn next_semi_batch(&mut self, corpus: &Corpus, split: &SemiSplit) -> Result<SemiBatch> {
        if split.labeled.is_empty() || split.unlabeled.is_empty() {
            return Err(Error::Config("both labeled and unlabeled sets must be non-empty".into()));
        }
        let (picks, labeled) = self.draw(corpus, &split.labeled);
        let labels = corpus.label_tensor(&picks);
        let (_, unlabeled) = self.draw(corpus, &split.unlabeled);
        Ok(SemiBatch {
            labeled,
            labels: labels.to_kind(Kind::Float),
            unlabeled,
        })
    }
}

/// Path of the annotation table under a dataset root.
pub fn annotation_path(root: &Path) -> PathBuf {
    root.join(ANNOTATION_FILE)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use tch::Device;

    fn write(dir: &Path, text: &str) -> PathBuf {
        let p = dir.join("attributes.txt");
        fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn parses_plus_minus_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "a,b,c\nimg0.png,1,-1,1\n");
        let idx = load_annotation_table(&p, &[]).unwrap();
        assert_eq!(idx.names, ["a", "b", "c"]);
        assert_eq!(idx.get("img0.png").unwrap().values(), &[1, -1, 1]);
    }

    #[test]
    fn maps_zero_one_convention() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "filename a b c\nimg0.png 1 0 1\n");
        let idx = load_annotation_table(&p, &[]).unwrap();
        let label = idx.get("img0.png").unwrap();
        assert_eq!(label.values(), &[1, -1, 1]);
        assert_eq!(label.to_binary(), vec![1, 0, 1]);
    }

    #[test]
    fn celeba_layout_with_selection() {
        let dir = tempfile::tempdir().unwrap();
        let names: Vec<String> = (0..40).map(|i| format!("attr{i}")).collect();
        let mut text = format!("2\n{}\n", names.join(" "));
        for r in 0..2 {
            let vals: Vec<String> = (0..40).map(|i| if (i + r) % 3 == 0 { "1" } else { "-1" }.to_string()).collect();
            text.push_str(&format!("{:06}.jpg  {}\n", r, vals.join(" ")));
        }
        let p = write(dir.path(), &text);
        let selected: Vec<String> = names[..8].to_vec();
        let idx = load_annotation_table(&p, &selected).unwrap();
        assert_eq!(idx.nd(), 8);
        assert_eq!(idx.len(), 2);
        assert!(idx.entries.iter().all(|(_, l)| l.len() == 8));
        assert_eq!(idx.get("000001.jpg").unwrap().values()[..3], [-1, -1, 1]);
    }

    #[test]
    fn missing_column_names_it() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "a,b\nx.png,1,1\n");
        let err = load_annotation_table(&p, &["eyeglasses".to_string()]).unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("eyeglasses")));
    }

    #[test]
    fn bad_row_reports_row_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "a,b\nx.png,1,1\ny.png,1,7\n");
        match load_annotation_table(&p, &[]).unwrap_err() {
            Error::Ingestion { row, .. } => assert_eq!(row, 3),
            e => panic!("unexpected {e}"),
        }
        let p = write(dir.path(), "a,b\nx.png,1,yes\n");
        assert!(matches!(load_annotation_table(&p, &[]), Err(Error::Ingestion { row: 2, .. })));
    }

    #[test]
    fn split_counts_and_determinism() {
        let annotated: Vec<usize> = (0..1000).collect();
        let s = split_indices(1000, &annotated, 0.1, 5).unwrap();
        assert_eq!(s.labeled.len(), 100);
        assert_eq!(s.unlabeled.len(), 900);
        assert_eq!(s, split_indices(1000, &annotated, 0.1, 5).unwrap());
        assert_ne!(s, split_indices(1000, &annotated, 0.1, 6).unwrap());

        let full = split_indices(1000, &annotated, 1.0, 5).unwrap();
        assert_eq!(full.labeled.len(), 1000);
        assert_eq!(full.unlabeled, full.labeled);
    }

    #[test]
    fn split_rejects_bad_fractions() {
        let annotated: Vec<usize> = (0..10).collect();
        assert!(split_indices(10, &annotated, 0.0, 1).is_err());
        assert!(split_indices(10, &annotated, 1.5, 1).is_err());
        assert!(split_indices(10, &annotated, 0.01, 1).is_err());
    }

    fn toy_corpus(n: usize) -> Corpus {
        let images = Tensor::rand([n as i64, 3, 8, 8], (Kind::Float, Device::Cpu)) * 2.0 - 1.0;
        Corpus {
            names: vec!["a".into(), "b".into()],
            files: (0..n).map(|i| format!("{i}.png")).collect(),
            images,
            labels: (0..n)
                .map(|i| Some(AttributeLabel::new(vec![if i % 2 == 0 { 1 } else { -1 }, 1]).unwrap()))
                .collect(),
        }
    }

    #[test]
    fn batch_shapes_and_range() {
        let corpus = toy_corpus(20);
        let split = make_semi_split(&corpus, 0.5, 0).unwrap();
        let mut sampler = BatchSampler::new(1, 8).unwrap();
        let b = sampler.next_semi_batch(&corpus, &split).unwrap();
        assert_eq!(b.labeled.size(), [8, 3, 8, 8]);
        assert_eq!(b.unlabeled.size(), [8, 3, 8, 8]);
        assert_eq!(b.labels.size(), [8, 2]);
        assert!(b.labeled.abs().max().double_value(&[]) <= 1.0);

        let mut single = BatchSampler::new(1, 1).unwrap();
        assert_eq!(single.next_semi_batch(&corpus, &split).unwrap().batch_size(), 1);
    }

    #[test]
    fn labels_follow_sampled_images() {
        // image content encodes its label so flips cannot break the pairing check
        let n = 16;
        let mut corpus = toy_corpus(n);
        let vals: Vec<f32> = (0..n).map(|i| if i % 2 == 0 { 0.5 } else { -0.5 }).collect();
        corpus.images = Tensor::from_slice(&vals).view([n as i64, 1, 1, 1]).expand([n as i64, 3, 8, 8], false).copy();
        let split = make_semi_split(&corpus, 1.0, 0).unwrap();
        let mut sampler = BatchSampler::new(9, 8).unwrap();
        for _ in 0..10 {
            let b = sampler.next_semi_batch(&corpus, &split).unwrap();
            let pix = b.labeled.select(1, 0).select(1, 0).select(1, 0);
            let lab = b.labels.select(1, 0);
            let agree = (pix.sign() - lab).abs().max().double_value(&[]);
            assert_eq!(agree, 0.0);
        }
    }

    proptest! {
        #[test]
        fn label_round_trip(bits in proptest::collection::vec(any::<bool>(), 1..16)) {
            let label = AttributeLabel::new(bits.iter().map(|b| if *b { 1 } else { -1 }).collect()).unwrap();
            let raw: Vec<i64> = label.to_binary().iter().map(|b| *b as i64).collect();
            prop_assert_eq!(AttributeLabel::from_raw(&raw).unwrap(), label);
        }

        #[test]
        fn split_is_partition(total in 2usize..300, frac in 0.05f64..0.95, seed in any::<u64>()) {
            let annotated: Vec<usize> = (0..total).collect();
            if let Ok(s) = split_indices(total, &annotated, frac, seed) {
                if s.labeled.len() < total {
                    let mut all: Vec<usize> = s.labeled.iter().chain(&s.unlabeled).copied().collect();
                    all.sort_unstable();
                    prop_assert_eq!(all, annotated);
                }
            }
        }

        #[test]
        fn batches_are_balanced(seed in any::<u64>(), b in 1usize..6) {
            let corpus = toy_corpus(12);
            let split = make_semi_split(&corpus, 0.25, seed).unwrap();
            let mut sampler = BatchSampler::new(seed, b).unwrap();
            let batch = sampler.next_semi_batch(&corpus, &split).unwrap();
            prop_assert_eq!(batch.labeled.size()[0], b as i64);
            prop_assert_eq!(batch.unlabeled.size()[0], b as i64);
        }
    }
}
