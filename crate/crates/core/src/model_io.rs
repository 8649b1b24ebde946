//! `SGPX` model files.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! "SGPX" | u16 version | u32 m | u32 d | u32 C
//! f64 × m·d   inducing inputs, row-major
//! f64 × m·C   μ, row-major
//! f64 × m·m   A, row-major
//! f64 × 3     lengthscale, signal variance, noise variance
//! u32 × m     inducing labels
//! u32 count, then count × (u32 len, UTF-8 key, u32 len, UTF-8 value)
//! ```

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use crate::data::ByteReader;
use crate::error::{Error, Result};
use crate::kernels::KernelSpec;
use crate::svgp::{ModelMetadata, SvgpModel};

pub const MODEL_MAGIC: &[u8; 4] = b"SGPX";
pub const MODEL_VERSION: u16 = 1;

fn u32_of(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::input(format!("{what} {v} does not fit in u32")))
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    out.extend_from_slice(&u32_of(s.len(), "string length")?.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

fn put_matrix(out: &mut Vec<u8>, m: &DMatrix<f64>) {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.extend_from_slice(&m[(i, j)].to_le_bytes());
        }
    }
}

fn metadata_entries(model: &SvgpModel) -> Vec<(String, String)> {
    let md = &model.metadata;
    let mut entries = vec![
        ("m".to_string(), model.num_inducing().to_string()),
        ("n_source".to_string(), md.n_source.to_string()),
        ("jitter_used".to_string(), format!("{:?}", md.jitter_used)),
        ("selection_method".to_string(), md.selection_method.clone()),
    ];
    if let Some(seed) = md.seed {
        entries.push(("seed".to_string(), seed.to_string()));
    }
    entries.extend(md.extra.iter().map(|(k, v)| (k.clone(), v.clone())));
    entries
}

pub fn encode_model(model: &SvgpModel) -> Result<Vec<u8>> {
    let m = model.num_inducing();
    let d = model.dim();
    let c = model.class_count();
    let mut out = Vec::with_capacity(18 + 8 * (m * (d + c + m) + 3) + 4 * m);
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.extend_from_slice(&u32_of(m, "inducing count")?.to_le_bytes());
    out.extend_from_slice(&u32_of(d, "dimension")?.to_le_bytes());
    out.extend_from_slice(&u32_of(c, "class count")?.to_le_bytes());
    put_matrix(&mut out, model.inducing_inputs());
    put_matrix(&mut out, model.mu());
    put_matrix(&mut out, model.a());
    let spec = model.spec();
    for v in [spec.lengthscale, spec.signal_variance, spec.noise_variance] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &l in model.inducing_labels() {
        out.extend_from_slice(&u32_of(l, "label")?.to_le_bytes());
    }
    let entries = metadata_entries(model);
    out.extend_from_slice(&u32_of(entries.len(), "metadata count")?.to_le_bytes());
    for (k, v) in &entries {
        put_str(&mut out, k)?;
        put_str(&mut out, v)?;
    }
    Ok(out)
}

fn read_matrix(r: &mut ByteReader<'_>, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    let mut values = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        values.push(r.f64()?);
    }
    Ok(DMatrix::from_row_slice(rows, cols, &values))
}

fn read_str(r: &mut ByteReader<'_>) -> Result<String> {
    let len = r.u32()? as usize;
    let off = r.offset();
    let bytes = r.take(len)?;
    String::from_utf8(bytes.to_vec())
        .map_err(|_| Error::parse(format!("byte {off}"), "metadata is not valid UTF-8"))
}

pub fn decode_model(bytes: &[u8]) -> Result<SvgpModel> {
    let mut r = ByteReader::new(bytes);
    if r.take(4)? != MODEL_MAGIC {
        return Err(Error::parse("byte 0", "missing SGPX magic"));
    }
    let version = r.u16()?;
    if version != MODEL_VERSION {
        return Err(Error::parse(
            "byte 4",
            format!("unsupported SGPX version {version}"),
        ));
    }
    let m = r.u32()? as usize;
    let d = r.u32()? as usize;
    let c = r.u32()? as usize;
    let xm = read_matrix(&mut r, m, d)?;
    let mu = read_matrix(&mut r, m, c)?;
    let a = read_matrix(&mut r, m, m)?;
    let spec = KernelSpec {
        lengthscale: r.f64()?,
        signal_variance: r.f64()?,
        noise_variance: r.f64()?,
    };
    let mut labels = Vec::with_capacity(m);
    for _ in 0..m {
        let off = r.offset();
        let l = r.u32()? as usize;
        if l >= c {
            return Err(Error::parse(
                format!("byte {off}"),
                format!("inducing label {l} out of range for {c} classes"),
            ));
        }
        labels.push(l);
    }
    let count = r.u32()? as usize;
    let mut metadata = ModelMetadata::default();
    for _ in 0..count {
        let off = r.offset();
        let key = read_str(&mut r)?;
        let value = read_str(&mut r)?;
        let bad = |what: &str| Error::parse(format!("byte {off}"), format!("bad {what} '{value}'"));
        match key.as_str() {
            "m" => {
                if value.parse::<usize>().ok() != Some(m) {
                    return Err(bad("inducing count"));
                }
            }
            "n_source" => metadata.n_source = value.parse().map_err(|_| bad("n_source"))?,
            "jitter_used" => metadata.jitter_used = value.parse().map_err(|_| bad("jitter"))?,
            "selection_method" => metadata.selection_method = value,
            "seed" => metadata.seed = Some(value.parse().map_err(|_| bad("seed"))?),
            _ => {
                metadata.extra.insert(key, value);
            }
        }
    }
    if !r.finished() {
        return Err(Error::parse(
            format!("byte {}", r.offset()),
            "trailing bytes",
        ));
    }
    SvgpModel::from_parts(xm, labels, spec, mu, a, metadata)
}

pub fn save_model(model: &SvgpModel, path: &Path) -> Result<()> {
    fs::write(path, encode_model(model)?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<SvgpModel> {
    decode_model(&fs::read(path)?)
}
