//! Embedding datasets: validation, CSV and `EMBD` binary formats, synthetic
//! blob generation and stratified splitting.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub const EMBD_MAGIC: &[u8; 4] = b"EMBD";
pub const EMBD_VERSION: u16 = 1;

/// Precomputed classifier embeddings with their integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDataset {
    embeddings: DMatrix<f64>,
    labels: Vec<usize>,
    class_count: usize,
    pub provenance: String,
}

impl EmbeddingDataset {
    pub fn new(
        embeddings: DMatrix<f64>,
        labels: Vec<usize>,
        class_count: usize,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        let (n, d) = embeddings.shape();
        if n == 0 || d == 0 {
            return Err(Error::input(format!(
                "dataset must be non-empty, got {n}x{d}"
            )));
        }
        if class_count == 0 {
            return Err(Error::input("class count must be at least 1"));
        }
        if labels.len() != n {
            return Err(Error::input(format!(
                "{} labels for {n} embedding rows",
                labels.len()
            )));
        }
        if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= class_count) {
            return Err(Error::input(format!(
                "label {label} in row {row} is out of range for {class_count} classes"
            )));
        }
        for i in 0..n {
            if embeddings.row(i).iter().any(|v| !v.is_finite()) {
                return Err(Error::input(format!("row {i} contains a non-finite value")));
            }
        }
        Ok(EmbeddingDataset {
            embeddings,
            labels,
            class_count,
            provenance: provenance.into(),
        })
    }

    pub fn embeddings(&self) -> &DMatrix<f64> {
        &self.embeddings
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn len(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }

    /// New dataset made of the given rows, keeping the class count.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::input(format!(
                "row index {bad} out of range for {} rows",
                self.len()
            )));
        }
        let d = self.dim();
        let x = DMatrix::from_fn(indices.len(), d, |i, j| self.embeddings[(indices[i], j)]);
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        EmbeddingDataset::new(x, labels, self.class_count, self.provenance.clone())
    }

    /// One-vs-rest indicator targets, one column per class.
    pub fn one_hot_targets(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.len(), self.class_count, |i, c| {
            if self.labels[i] == c {
                1.0
            } else {
                0.0
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    Csv,
    Embd,
}

impl std::str::FromStr for DatasetFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(DatasetFormat::Csv),
            "embd" | "embd-binary" => Ok(DatasetFormat::Embd),
            other => Err(Error::input(format!("unknown dataset format '{other}'"))),
        }
    }
}

/// Loads a dataset, detecting the format from the magic bytes unless one is given.
pub fn load_dataset(path: &Path, format: Option<DatasetFormat>) -> Result<EmbeddingDataset> {
    let bytes = fs::read(path)?;
    let format = format.unwrap_or(if bytes.starts_with(EMBD_MAGIC) {
        DatasetFormat::Embd
    } else {
        DatasetFormat::Csv
    });
    let mut ds = match format {
        DatasetFormat::Csv => read_csv(&bytes[..])?,
        DatasetFormat::Embd => read_embd(&bytes)?,
    };
    ds.provenance = path.display().to_string();
    Ok(ds)
}

pub fn save_dataset(ds: &EmbeddingDataset, path: &Path, format: DatasetFormat) -> Result<()> {
    let mut out = Vec::new();
    match format {
        DatasetFormat::Csv => write_csv(ds, &mut out)?,
        DatasetFormat::Embd => write_embd(ds, &mut out)?,
    }
    fs::write(path, out)?;
    Ok(())
}

/// Header `d,label,c0,..,c{d-1}`; every row repeats its dimension in the
/// first field.
pub fn write_csv<W: Write>(ds: &EmbeddingDataset, mut w: W) -> Result<()> {
    let d = ds.dim();
    write!(w, "d,label")?;
    for j in 0..d {
        write!(w, ",c{j}")?;
    }
    writeln!(w)?;
    for i in 0..ds.len() {
        write!(w, "{d},{}", ds.labels[i])?;
        for j in 0..d {
            write!(w, ",{:.16e}", ds.embeddings[(i, j)])?;
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_csv<R: Read>(r: R) -> Result<EmbeddingDataset> {
    let reader = BufReader::new(r);
    let mut lines = reader.lines();
    let header = match lines.next() {
        Some(line) => line?,
        None => return Err(Error::parse("line 1", "empty file")),
    };
    let fields: Vec<&str> = header.trim().split(',').map(str::trim).collect();
    if fields.len() < 3 || fields[0] != "d" || fields[1] != "label" {
        return Err(Error::parse("line 1", "expected header 'd,label,c0,...'"));
    }
    let d = fields.len() - 2;
    for (j, f) in fields[2..].iter().enumerate() {
        if *f != format!("c{j}") {
            return Err(Error::parse(
                "line 1",
                format!("expected column c{j}, found '{f}'"),
            ));
        }
    }

    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (offset, line) in lines.enumerate() {
        let line = line?;
        let row = offset + 1;
        let loc = || format!("row {row} (line {})", row + 1);
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.trim().split(',').map(str::trim).collect();
        if parts.len() != d + 2 {
            return Err(Error::parse(
                loc(),
                format!("expected {} fields, found {}", d + 2, parts.len()),
            ));
        }
        let row_d: usize = parts[0]
            .parse()
            .map_err(|_| Error::parse(loc(), format!("bad dimension '{}'", parts[0])))?;
        if row_d != d {
            return Err(Error::parse(
                loc(),
                format!("row dimension {row_d} does not match header dimension {d}"),
            ));
        }
        let label: usize = parts[1]
            .parse()
            .map_err(|_| Error::parse(loc(), format!("bad label '{}'", parts[1])))?;
        labels.push(label);
        for p in &parts[2..] {
            let v: f64 = p
                .parse()
                .map_err(|_| Error::parse(loc(), format!("bad value '{p}'")))?;
            if !v.is_finite() {
                return Err(Error::parse(loc(), format!("non-finite value '{p}'")));
            }
            values.push(v);
        }
    }
    if labels.is_empty() {
        return Err(Error::parse("line 2", "no data rows"));
    }
    let n = labels.len();
    let class_count = labels.iter().max().map_or(1, |&m| m + 1);
    EmbeddingDataset::new(
        DMatrix::from_row_slice(n, d, &values),
        labels,
        class_count,
        "",
    )
}

pub fn write_embd<W: Write>(ds: &EmbeddingDataset, mut w: W) -> Result<()> {
    let to_u32 = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| Error::input(format!("{what} {v} does not fit in u32")))
    };
    w.write_all(EMBD_MAGIC)?;
    w.write_all(&EMBD_VERSION.to_le_bytes())?;
    w.write_all(&to_u32(ds.len(), "row count")?.to_le_bytes())?;
    w.write_all(&to_u32(ds.dim(), "dimension")?.to_le_bytes())?;
    w.write_all(&to_u32(ds.class_count, "class count")?.to_le_bytes())?;
    for &l in &ds.labels {
        w.write_all(&to_u32(l, "label")?.to_le_bytes())?;
    }
    for i in 0..ds.len() {
        for j in 0..ds.dim() {
            w.write_all(&ds.embeddings[(i, j)].to_le_bytes())?;
        }
    }
    Ok(())
}

/// Little-endian cursor over a byte buffer with offset-tagged errors.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        ByteReader { bytes, pos: 0 }
    }

    pub(crate) fn offset(&self) -> usize {
        self.pos
    }

    pub(crate) fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(len).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::parse(
                format!("byte {}", self.pos),
                format!("unexpected end of file reading {len} bytes"),
            )),
        }
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn finished(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub fn read_embd(bytes: &[u8]) -> Result<EmbeddingDataset> {
    let mut r = ByteReader::new(bytes);
    if r.take(4)? != EMBD_MAGIC {
        return Err(Error::parse("byte 0", "missing EMBD magic"));
    }
    let version = r.u16()?;
    if version != EMBD_VERSION {
        return Err(Error::parse(
            "byte 4",
            format!("unsupported EMBD version {version}"),
        ));
    }
    let n = r.u32()? as usize;
    let d = r.u32()? as usize;
    let class_count = r.u32()? as usize;
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let off = r.offset();
        let l = r.u32()? as usize;
        if l >= class_count {
            return Err(Error::parse(
                format!("byte {off}"),
                format!("label {l} of row {i} out of range for {class_count} classes"),
            ));
        }
        labels.push(l);
    }
    let mut values = Vec::with_capacity(n * d);
    for i in 0..n {
        for _ in 0..d {
            let off = r.offset();
            let v = r.f64()?;
            if !v.is_finite() {
                return Err(Error::parse(
                    format!("byte {off}"),
                    format!("non-finite value in row {i}"),
                ));
            }
            values.push(v);
        }
    }
    if !r.finished() {
        return Err(Error::parse(
            format!("byte {}", r.offset()),
            "trailing bytes",
        ));
    }
    EmbeddingDataset::new(
        DMatrix::from_row_slice(n, d, &values),
        labels,
        class_count,
        "",
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub points_per_class: usize,
    pub dim: usize,
    pub cluster_spread: f64,
    pub class_separation: f64,
    pub seed: u64,
}

const CENTER_RETRIES: usize = 10_000;

/// Class centers drawn uniformly from a ball, rejecting any closer than the
/// requested separation to an existing center.
fn place_centers(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
    let radius = cfg.class_separation * (cfg.classes as f64).powf(1.0 / cfg.dim as f64).max(1.0);
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(cfg.classes);
    for k in 0..cfg.classes {
        let mut placed = false;
        for _ in 0..CENTER_RETRIES {
            let dir: Vec<f64> = (0..cfg.dim).map(|_| rng.sample(StandardNormal)).collect();
            let norm = dir
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt()
                .max(f64::MIN_POSITIVE);
            let r = radius * rng.random::<f64>().powf(1.0 / cfg.dim as f64);
            let c: Vec<f64> = dir.iter().map(|v| v / norm * r).collect();
            let far_enough = centers
                .iter()
                .all(|o| crate::kernels::sq_dist(o, &c).sqrt() >= cfg.class_separation);
            if far_enough {
                centers.push(c);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Config(format!(
                "could not place center {k} of {} at separation {} in {} dimensions",
                cfg.classes, cfg.class_separation, cfg.dim
            )));
        }
    }
    Ok(centers)
}

/// Isotropic Gaussian blob per class.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<EmbeddingDataset> {
    if cfg.classes == 0 || cfg.points_per_class == 0 || cfg.dim == 0 {
        return Err(Error::Config(
            "classes, points per class and dim must be >= 1".into(),
        ));
    }
    if !(cfg.cluster_spread > 0.0 && cfg.cluster_spread.is_finite()) {
        return Err(Error::Config("cluster spread must be positive".into()));
    }
    if !(cfg.class_separation > 0.0 && cfg.class_separation.is_finite()) {
        return Err(Error::Config("class separation must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let centers = place_centers(cfg, &mut rng)?;
    let n = cfg.classes * cfg.points_per_class;
    let mut values = Vec::with_capacity(n * cfg.dim);
    let mut labels = Vec::with_capacity(n);
    for (k, center) in centers.iter().enumerate() {
        for _ in 0..cfg.points_per_class {
            for c in center {
                let z: f64 = StandardNormal.sample(&mut rng);
                values.push(c + cfg.cluster_spread * z);
            }
            labels.push(k);
        }
    }
    EmbeddingDataset::new(
        DMatrix::from_row_slice(n, cfg.dim, &values),
        labels,
        cfg.classes,
        format!(
            "synthetic blobs: classes={} per_class={} d={} spread={} separation={} seed={}",
            cfg.classes,
            cfg.points_per_class,
            cfg.dim,
            cfg.cluster_spread,
            cfg.class_separation,
            cfg.seed
        ),
    )
}

/// Class centers used by [`generate_synthetic`] for a given config.
pub fn synthetic_centers(cfg: &SyntheticConfig) -> Result<Vec<Vec<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    place_centers(cfg, &mut rng)
}

/// Stratified train/validation row indices, each sorted ascending.
pub fn split_indices(
    ds: &EmbeddingDataset,
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::input(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let mut by_class = vec![Vec::new(); ds.class_count];
    for (i, &l) in ds.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut validation = Vec::new();
    for (class, mut members) in by_class.into_iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        if members.len() < 2 {
            return Err(Error::input(format!(
                "class {class} has {} member(s); stratified split needs at least 2",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        let k =
            ((members.len() as f64 * train_fraction).round() as usize).clamp(1, members.len() - 1);
        train.extend_from_slice(&members[..k]);
        validation.extend_from_slice(&members[k..]);
    }
    train.sort_unstable();
    validation.sort_unstable();
    Ok((train, validation))
}

pub fn split(
    ds: &EmbeddingDataset,
    train_fraction: f64,
    seed: u64,
) -> Result<(EmbeddingDataset, EmbeddingDataset)> {
    let (train, validation) = split_indices(ds, train_fraction, seed)?;
    Ok((ds.subset(&train)?, ds.subset(&validation)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn blobs(seed: u64) -> EmbeddingDataset {
        generate_synthetic(&SyntheticConfig {
            classes: 3,
            points_per_class: 10,
            dim: 2,
            cluster_spread: 0.3,
            class_separation: 3.0,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn literal_csv_fixture() {
        let text = "d,label,c0,c1\n2,0,1.5,-2\n2,2,0.25,3e-1\n2,1,0,1e3\n";
        let ds = read_csv(text.as_bytes()).unwrap();
        assert_eq!(ds.labels(), &[0, 2, 1]);
        assert_eq!(ds.class_count(), 3);
        let expected = DMatrix::from_row_slice(3, 2, &[1.5, -2.0, 0.25, 0.3, 0.0, 1000.0]);
        assert_eq!(ds.embeddings(), &expected);
    }

    #[test]
    fn csv_nan_names_row() {
        let mut text = String::from("d,label,c0\n");
        for i in 1..=20 {
            if i == 17 {
                text.push_str("1,0,NaN\n");
            } else {
                text.push_str(&format!("1,0,{i}.0\n"));
            }
        }
        let err = read_csv(text.as_bytes()).unwrap_err().to_string();
        assert!(err.contains("row 17"), "{err}");
    }

    #[test]
    fn csv_dimension_mismatch() {
        let text = "d,label,c0,c1\n3,0,1,2\n";
        assert!(matches!(
            read_csv(text.as_bytes()),
            Err(Error::Parse { .. })
        ));
        let text = "d,label,c0,c1\n2,0,1\n";
        assert!(matches!(
            read_csv(text.as_bytes()),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn embd_label_out_of_range() {
        let ds = blobs(1);
        let mut bytes = Vec::new();
        write_embd(&ds, &mut bytes).unwrap();
        // first label sits right after the 18-byte header
        bytes[18..22].copy_from_slice(&7u32.to_le_bytes());
        let err = read_embd(&bytes).unwrap_err();
        assert!(err.to_string().contains("byte 18"), "{err}");
    }

    #[test]
    fn format_detection_by_magic() {
        let dir = tempfile::tempdir().unwrap();
        let ds = blobs(2);
        for (name, fmt) in [
            ("a.csv", DatasetFormat::Csv),
            ("a.bin", DatasetFormat::Embd),
        ] {
            let p = dir.path().join(name);
            save_dataset(&ds, &p, fmt).unwrap();
            let back = load_dataset(&p, None).unwrap();
            assert_eq!(back.embeddings(), ds.embeddings());
            assert_eq!(back.labels(), ds.labels());
        }
    }

    #[test]
    fn single_class_synthetic() {
        let ds = generate_synthetic(&SyntheticConfig {
            classes: 1,
            points_per_class: 5,
            dim: 3,
            cluster_spread: 1.0,
            class_separation: 1.0,
            seed: 0,
        })
        .unwrap();
        assert!(ds.labels().iter().all(|&l| l == 0));
    }

    #[test]
    fn synthetic_is_deterministic() {
        assert_eq!(blobs(9), blobs(9));
        assert_ne!(blobs(9).embeddings(), blobs(10).embeddings());
    }

    #[test]
    fn bad_synthetic_config() {
        let cfg = SyntheticConfig {
            classes: 3,
            points_per_class: 1,
            dim: 2,
            cluster_spread: 0.0,
            class_separation: 1.0,
            seed: 0,
        };
        assert!(matches!(generate_synthetic(&cfg), Err(Error::Config(_))));
        let cfg = SyntheticConfig {
            cluster_spread: 1.0,
            classes: 0,
            ..cfg
        };
        assert!(matches!(generate_synthetic(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn nearest_center_agreement() {
        let mut agree = 0usize;
        let mut total = 0usize;
        for seed in 0..10 {
            let cfg = SyntheticConfig {
                classes: 4,
                points_per_class: 50,
                dim: 5,
                cluster_spread: 0.2,
                class_separation: 5.0,
                seed,
            };
            let ds = generate_synthetic(&cfg).unwrap();
            let centers = synthetic_centers(&cfg).unwrap();
            for i in 0..ds.len() {
                let row: Vec<f64> = ds.embeddings().row(i).iter().copied().collect();
                let nearest = (0..centers.len())
                    .min_by(|&a, &b| {
                        crate::kernels::sq_dist(&row, &centers[a])
                            .total_cmp(&crate::kernels::sq_dist(&row, &centers[b]))
                    })
                    .unwrap();
                agree += usize::from(nearest == ds.labels()[i]);
                total += 1;
            }
        }
        assert!(agree as f64 / total as f64 >= 0.99);
    }

    #[test]
    fn stratified_split_counts() {
        let ds = blobs(4);
        let (train, val) = split(&ds, 0.5, 1).unwrap();
        for c in 0..3 {
            assert_eq!(train.labels().iter().filter(|&&l| l == c).count(), 5);
            assert_eq!(val.labels().iter().filter(|&&l| l == c).count(), 5);
        }
        let (a, b) = split_indices(&ds, 0.5, 1).unwrap();
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..ds.len()).collect::<Vec<_>>());
        assert_eq!(split_indices(&ds, 0.5, 1).unwrap(), (a, b));
    }

    #[test]
    fn split_needs_two_per_class() {
        let ds = EmbeddingDataset::new(
            DMatrix::from_row_slice(3, 1, &[0.0, 1.0, 2.0]),
            vec![0, 0, 1],
            2,
            "",
        )
        .unwrap();
        assert!(split(&ds, 0.5, 0).is_err());
        assert!(split(&blobs(0), 1.0, 0).is_err());
    }

    proptest! {
        #[test]
        fn round_trips_are_exact(
            vals in proptest::collection::vec(-1e6f64..1e6, 1..60),
            labels in proptest::collection::vec(0usize..4, 1..60),
        ) {
            let n = vals.len().min(labels.len());
            let ds = EmbeddingDataset::new(
                DMatrix::from_row_slice(n, 1, &vals[..n]), labels[..n].to_vec(), 4, "").unwrap();
            let mut bin = Vec::new();
            write_embd(&ds, &mut bin).unwrap();
            let back = read_embd(&bin).unwrap();
            prop_assert_eq!(back.embeddings(), ds.embeddings());
            prop_assert_eq!(back.labels(), ds.labels());
            let mut text = Vec::new();
            write_csv(&ds, &mut text).unwrap();
            let back = read_csv(&text[..]).unwrap();
            prop_assert_eq!(back.embeddings(), ds.embeddings());
            prop_assert_eq!(back.labels(), ds.labels());
        }

        #[test]
        fn split_is_stratified(per_class in 2usize..30, frac in 0.05f64..0.95, seed in 0u64..100) {
            let ds = generate_synthetic(&SyntheticConfig {
                classes: 3, points_per_class: per_class, dim: 2,
                cluster_spread: 1.0, class_separation: 1.0, seed,
            }).unwrap();
            let (train, val) = split_indices(&ds, frac, seed).unwrap();
            prop_assert_eq!(train.len() + val.len(), ds.len());
            for c in 0..3 {
                let k = train.iter().filter(|&&i| ds.labels()[i] == c).count() as f64;
                let exact = per_class as f64 * frac;
                prop_assert!((k - exact).abs() <= 1.0);
            }
        }
    }
}
