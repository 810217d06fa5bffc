//! Self-describing binary checkpoints.
//!
//! Layout: 8-byte magic `SSAS0001`; u32-LE length + JSON metadata (model
//! kind, full config snapshot, vocabularies, seed, epoch, final losses);
//! u32-LE array count; then named little-endian f32 arrays, each as
//! u32-LE name length, name bytes, u32-LE rank, u32-LE dims, and the
//! elements. Trained parameters come first in `param_layout` order; the
//! spatial-shift baseline appends its fixed displacement histograms as
//! `stat/<predicate>`. Loading rebuilds the model from the metadata and
//! fails loudly on a foreign magic, a kind/layout mismatch, or any shape
//! that disagrees with the config snapshot.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use shiftlab_core::error::{Error, Result};
use shiftlab_core::scene::PREDICATES;
use shiftlab_core::tensor::Tensor;
use shiftlab_core::train::{Grounder, Net};
use shiftlab_core::Real;

use crate::config::FileConfig;

pub const MAGIC: &[u8; 8] = b"SSAS0001";

/// Final training losses recorded alongside the parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct FinalLosses {
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Model kind tag ("ssas", "cooccur", "vrd", "spatialshift").
    pub kind: String,
    /// Complete resolved run configuration.
    pub config: FileConfig,
    pub vocab: Vec<String>,
    pub predicates: Vec<String>,
    pub seed: u64,
    /// Epochs completed when the checkpoint was written.
    pub epoch: usize,
    pub metrics: Option<FinalLosses>,
    /// Spatial-shift only: which predicates had no training instances and
    /// fell back to a uniform displacement histogram.
    #[serde(default)]
    pub uniform: Option<Vec<bool>>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v)
        .map_err(|_| Error::Invalid(format!("checkpoint field {v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Arrays persisted for a model: every trained parameter, plus the
/// spatial-shift baseline's fixed histograms.
fn array_manifest(model: &Grounder<Real>) -> (Vec<(String, Vec<usize>)>, Vec<Tensor<Real>>) {
    let mut names = model.param_layout();
    let mut arrays: Vec<Tensor<Real>> = model.params().into_iter().cloned().collect();
    if let Net::SpatialShift(m) = &model.net {
        for (p, k) in PREDICATES.iter().zip(&m.kernels) {
            names.push((format!("stat/{p}"), k.shape().to_vec()));
            arrays.push(k.clone());
        }
    }
    (names, arrays)
}

fn encode(
    meta_json: &[u8],
    names: &[(String, Vec<usize>)],
    arrays: &[Tensor<Real>],
) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, meta_json.len())?;
    out.extend_from_slice(meta_json);
    put_u32(&mut out, arrays.len())?;
    for ((name, shape), t) in names.iter().zip(arrays) {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, shape.len())?;
        for &d in shape {
            put_u32(&mut out, d)?;
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save(path: &Path, model: &Grounder<Real>, meta: &CheckpointMeta) -> Result<()> {
    if meta.kind != model.net.kind() {
        return Err(Error::Invalid(format!(
            "metadata kind {:?} does not match the model ({:?})",
            meta.kind,
            model.net.kind()
        )));
    }
    let meta_json =
        serde_json::to_vec(meta).map_err(|e| Error::format(path, e.to_string()))?;
    let (names, arrays) = array_manifest(model);
    let out = encode(&meta_json, &names, &arrays)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))?;
    Ok(())
}

struct Reader<'a> {
    path: &'a Path,
    buf: Vec<u8>,
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                self.path,
                format!("truncated checkpoint: {what} needs {n} more bytes"),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn load(path: &Path) -> Result<(Grounder<Real>, CheckpointMeta)> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_end(&mut buf)
        .map_err(|e| Error::io(path, e))?;
    let mut r = Reader { path, buf, pos: 0 };

    if r.take(8, "magic")? != MAGIC {
        return Err(Error::format(path, "not a model checkpoint (bad magic)"));
    }
    let meta_len = r.u32("metadata length")?;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len, "metadata")?)
        .map_err(|e| Error::format(path, format!("metadata: {e}")))?;
    meta.config.validate()?;
    if meta.kind != meta.config.model.kind.name() {
        return Err(Error::format(
            path,
            format!(
                "kind tag {:?} disagrees with the config snapshot ({:?})",
                meta.kind,
                meta.config.model.kind.name()
            ),
        ));
    }
    if meta.vocab != meta.config.gen.categories {
        return Err(Error::format(path, "vocabulary disagrees with the config snapshot"));
    }

    let count = r.u32("array count")?;
    let mut arrays: Vec<(String, Tensor<Real>)> = Vec::with_capacity(count);
    for i in 0..count {
        let name_len = r.u32("array name length")?;
        let name = std::str::from_utf8(r.take(name_len, "array name")?)
            .map_err(|_| Error::format(path, format!("array {i}: name is not UTF-8")))?
            .to_string();
        let rank = r.u32("array rank")?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("array dimension")?);
        }
        let len: usize = shape.iter().product();
        let bytes = r.take(len * 4, "array data")?;
        let data: Vec<Real> = bytes
            .chunks_exact(4)
            .map(|c| Real::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::from_vec(&shape, data)
            .map_err(|_| Error::format(path, format!("array {name}: degenerate shape")))?;
        arrays.push((name, t));
    }
    if r.pos != r.buf.len() {
        return Err(Error::format(
            path,
            format!("{} trailing bytes after the last array", r.buf.len() - r.pos),
        ));
    }

    // Rebuild the model skeleton, then overwrite every parameter from the
    // file, checking names and shapes against the config snapshot.
    let stat = if meta.kind == "spatialshift" {
        let uniform = meta.uniform.clone().ok_or_else(|| {
            Error::format(path, "spatialshift checkpoint lacks uniform-fallback flags")
        })?;
        let mut kernels = Vec::new();
        for p in PREDICATES {
            let want = format!("stat/{p}");
            let k = arrays
                .iter()
                .find(|(n, _)| *n == want)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| {
                    Error::format(path, format!("missing displacement histogram {want}"))
                })?;
            kernels.push(k);
        }
        Some((kernels, uniform))
    } else {
        None
    };
    let mut model = meta.config.build_grounder(stat, meta.seed)?;

    let (expected, _) = array_manifest(&model);
    if expected.len() != arrays.len() {
        return Err(Error::format(
            path,
            format!("expected {} arrays for a {} model, found {}", expected.len(), meta.kind, arrays.len()),
        ));
    }
    for (slot, ((want_name, want_shape), (name, t))) in
        model.params_mut().into_iter().zip(expected.iter().zip(&arrays))
    {
        if name != want_name {
            return Err(Error::format(
                path,
                format!("array {name:?} where the {} layout expects {want_name:?}", meta.kind),
            ));
        }
        if t.shape() != &want_shape[..] {
            return Err(Error::format(
                path,
                format!(
                    "array {name:?}: shape {:?} disagrees with the config snapshot ({want_shape:?})",
                    t.shape()
                ),
            ));
        }
        *slot = t.clone();
    }
    // Trailing stat arrays (already consumed into the model's kernels) only
    // need their name/shape agreement checked.
    for ((want_name, want_shape), (name, t)) in
        expected.iter().zip(&arrays).skip(model.params().len())
    {
        if name != want_name || t.shape() != &want_shape[..] {
            return Err(Error::format(
                path,
                format!("array {name:?} {:?} does not match {want_name:?} {want_shape:?}", t.shape()),
            ));
        }
    }
    Ok((model, meta))
}
