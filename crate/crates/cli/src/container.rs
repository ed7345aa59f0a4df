//! Binary model container.
//!
//! Layout: the 8-byte magic `FVDETMD1`, a little-endian `u32` version, then
//! tagged sections, each a 4-byte ASCII tag, a `u64` payload length and the
//! payload. A full model has, in order:
//!
//! - `CONF`: canonical config text (UTF-8)
//! - `CLSS`: class names, one per line
//! - `PCA `: `u32 in_dim, u32 out_dim`, then `f32` mean, row-major basis,
//!   variances
//! - `GMM `: `u32 k, u32 d`, then `f32` means, variances, priors
//! - `MODL`: `u32 count, u32 R, u32 K, u32 D`, then per model
//!   `u32 class_id, u32 len` and `len` `f32` values (weights then bias)
//!
//! All numbers are little-endian. Parameters are rounded to `f32` when a
//! [`ModelBundle`] is built, so a saved and reloaded bundle is identical to
//! the one in memory.

use std::path::Path;

use fvdet_core::codebook::GmmModel;
use fvdet_core::encoder::FvLayout;
use fvdet_core::encoding::FeaturePipeline;
use fvdet_core::error::{Error, Result};
use fvdet_core::model::LinearModel;
use fvdet_core::pca::PcaProjection;

use crate::config::Config;

pub const MAGIC: &[u8; 8] = b"FVDETMD1";
pub const VERSION: u32 = 1;

fn bad(msg: impl Into<String>) -> Error {
    Error::Container(msg.into())
}

fn round(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| f64::from(x as f32)).collect()
}

/// The projection with every parameter rounded to `f32`.
pub fn round_pca(p: &PcaProjection) -> Result<PcaProjection> {
    PcaProjection::from_parts(round(p.mean()), round(p.basis()), round(p.variances()), p.out_dim())
}

/// The mixture with every parameter rounded to `f32`.
pub fn round_gmm(g: &GmmModel) -> Result<GmmModel> {
    GmmModel::new(
        g.num_components(),
        g.dim(),
        round(g.means()),
        round(g.variances()),
        round(g.priors()),
    )
}

pub fn round_model(m: &LinearModel) -> Result<LinearModel> {
    LinearModel::new(m.class_id, m.layout, round(&m.weights), f64::from(m.bias as f32))
}

struct Writer(Vec<u8>);

impl Writer {
    fn new() -> Self {
        let mut v = MAGIC.to_vec();
        v.extend_from_slice(&VERSION.to_le_bytes());
        Self(v)
    }

    fn section(&mut self, tag: &[u8; 4], payload: &[u8]) {
        self.0.extend_from_slice(tag);
        self.0.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        self.0.extend_from_slice(payload);
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, v: &[f64]) {
    for &x in v {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(bad(format!("truncated {} section", self.what)));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| bad("length overflow"))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(bad(format!("{} trailing bytes in {} section", self.buf.len(), self.what)))
        }
    }
}

/// Splits a container into its `(tag, payload)` sections.
pub fn read_sections(bytes: &[u8]) -> Result<Vec<([u8; 4], &[u8])>> {
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(bad("not a model container (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(format!("unsupported container version {version}, expected {VERSION}")));
    }
    let mut rest = &bytes[12..];
    let mut out = Vec::new();
    while !rest.is_empty() {
        if rest.len() < 12 {
            return Err(bad("truncated section header"));
        }
        let tag: [u8; 4] = rest[..4].try_into().expect("4 bytes");
        let len = u64::from_le_bytes(rest[4..12].try_into().expect("8 bytes"));
        let len = usize::try_from(len).map_err(|_| bad("section length overflow"))?;
        if rest.len() - 12 < len {
            return Err(bad(format!("truncated {} section", String::from_utf8_lossy(&tag))));
        }
        out.push((tag, &rest[12..12 + len]));
        rest = &rest[12 + len..];
    }
    Ok(out)
}

fn section<'a>(sections: &[([u8; 4], &'a [u8])], tag: &[u8; 4]) -> Result<&'a [u8]> {
    let mut found = sections.iter().filter(|(t, _)| t == tag);
    let (_, payload) = found
        .next()
        .ok_or_else(|| bad(format!("missing {} section", String::from_utf8_lossy(tag))))?;
    if found.next().is_some() {
        return Err(bad(format!("repeated {} section", String::from_utf8_lossy(tag))));
    }
    Ok(payload)
}

fn encode_pca(p: &PcaProjection) -> Vec<u8> {
    let mut out = Vec::new();
    put_u32(&mut out, p.in_dim());
    put_u32(&mut out, p.out_dim());
    put_f32s(&mut out, p.mean());
    put_f32s(&mut out, p.basis());
    put_f32s(&mut out, p.variances());
    out
}

fn decode_pca(payload: &[u8]) -> Result<PcaProjection> {
    let mut r = Reader { buf: payload, what: "PCA" };
    let (in_dim, out_dim) = (r.u32()?, r.u32()?);
    let mean = r.f32s(in_dim)?;
    let basis = r.f32s(in_dim * out_dim)?;
    let variances = r.f32s(out_dim)?;
    r.finish()?;
    PcaProjection::from_parts(mean, basis, variances, out_dim)
}

fn encode_gmm(g: &GmmModel) -> Vec<u8> {
    let mut out = Vec::new();
    put_u32(&mut out, g.num_components());
    put_u32(&mut out, g.dim());
    put_f32s(&mut out, g.means());
    put_f32s(&mut out, g.variances());
    put_f32s(&mut out, g.priors());
    out
}

fn decode_gmm(payload: &[u8]) -> Result<GmmModel> {
    let mut r = Reader { buf: payload, what: "GMM" };
    let (k, d) = (r.u32()?, r.u32()?);
    let means = r.f32s(k * d)?;
    let variances = r.f32s(k * d)?;
    let priors = r.f32s(k)?;
    r.finish()?;
    GmmModel::new(k, d, means, variances, priors)
}

/// Writes a container holding only a PCA section.
pub fn save_pca(path: &Path, p: &PcaProjection) -> Result<()> {
    let mut w = Writer::new();
    w.section(b"PCA ", &encode_pca(p));
    std::fs::write(path, w.0)?;
    Ok(())
}

pub fn load_pca(path: &Path) -> Result<PcaProjection> {
    let bytes = std::fs::read(path)?;
    decode_pca(section(&read_sections(&bytes)?, b"PCA ")?)
}

/// Writes a container holding only a GMM section.
pub fn save_gmm(path: &Path, g: &GmmModel) -> Result<()> {
    let mut w = Writer::new();
    w.section(b"GMM ", &encode_gmm(g));
    std::fs::write(path, w.0)?;
    Ok(())
}

pub fn load_gmm(path: &Path) -> Result<GmmModel> {
    let bytes = std::fs::read(path)?;
    decode_gmm(section(&read_sections(&bytes)?, b"GMM ")?)
}

/// Writes sampled descriptors (`n` rows of `dim` values) as a `SMPL`
/// section: `u32 n, u32 dim`, then the rows as `f32`.
pub fn save_samples(path: &Path, rows: &[Vec<f64>], dim: usize) -> Result<()> {
    let mut payload = Vec::with_capacity(8 + rows.len() * dim * 4);
    put_u32(&mut payload, rows.len());
    put_u32(&mut payload, dim);
    for r in rows {
        if r.len() != dim {
            return Err(Error::DimensionMismatch {
                what: "sample row",
                expected: dim,
                got: r.len(),
            });
        }
        put_f32s(&mut payload, r);
    }
    let mut w = Writer::new();
    w.section(b"SMPL", &payload);
    std::fs::write(path, w.0)?;
    Ok(())
}

pub fn load_samples(path: &Path) -> Result<Vec<Vec<f64>>> {
    let bytes = std::fs::read(path)?;
    let mut r = Reader {
        buf: section(&read_sections(&bytes)?, b"SMPL")?,
        what: "SMPL",
    };
    let (n, dim) = (r.u32()?, r.u32()?);
    let rows = (0..n).map(|_| r.f32s(dim)).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    Ok(rows)
}

/// Everything needed to run detection: the config snapshot, class names,
/// projection, vocabulary and one model per class.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub config: Config,
    pub class_names: Vec<String>,
    pub pca: PcaProjection,
    pub gmm: GmmModel,
    pub models: Vec<LinearModel>,
}

impl ModelBundle {
    /// Rounds all parameters to `f32` and checks that the parts agree with
    /// each other and with the config.
    pub fn new(
        config: Config,
        class_names: Vec<String>,
        pca: &PcaProjection,
        gmm: &GmmModel,
        models: &[LinearModel],
    ) -> Result<Self> {
        let bundle = Self {
            config,
            class_names,
            pca: round_pca(pca)?,
            gmm: round_gmm(gmm)?,
            models: models.iter().map(round_model).collect::<Result<_>>()?,
        };
        bundle.check()?;
        Ok(bundle)
    }

    pub fn layout(&self) -> FvLayout {
        FvLayout::new(self.config.r, self.gmm.num_components(), self.gmm.dim())
    }

    fn check(&self) -> Result<()> {
        let c = &self.config;
        if self.pca.out_dim() != c.d || self.gmm.dim() != c.d || self.gmm.num_components() != c.k {
            return Err(bad(format!(
                "config says D={} K={} but the container holds PCA {}->{} and GMM K={} D={}",
                c.d,
                c.k,
                self.pca.in_dim(),
                self.pca.out_dim(),
                self.gmm.num_components(),
                self.gmm.dim()
            )));
        }
        if self.models.len() != self.class_names.len() {
            return Err(bad(format!(
                "{} models for {} classes",
                self.models.len(),
                self.class_names.len()
            )));
        }
        let layout = self.layout();
        for (i, m) in self.models.iter().enumerate() {
            if m.layout != layout || m.class_id != i {
                return Err(bad(format!("model {i} does not match the container layout")));
            }
        }
        Ok(())
    }

    pub fn pipeline(&self) -> FeaturePipeline {
        FeaturePipeline {
            patch: self.config.patch_params(),
            descriptor: self.config.descriptor_params(),
            drop_zero_energy: self.config.drop_zero_energy,
            pca: self.pca.clone(),
            gmm: self.gmm.clone(),
            pyramid: self.config.r,
            normalization: self.config.normalization,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.section(b"CONF", self.config.to_text().as_bytes());
        let names: String = self.class_names.iter().map(|n| format!("{n}\n")).collect();
        w.section(b"CLSS", names.as_bytes());
        w.section(b"PCA ", &encode_pca(&self.pca));
        w.section(b"GMM ", &encode_gmm(&self.gmm));
        let layout = self.layout();
        let mut out = Vec::new();
        put_u32(&mut out, self.models.len());
        put_u32(&mut out, layout.r);
        put_u32(&mut out, layout.k);
        put_u32(&mut out, layout.d);
        for m in &self.models {
            put_u32(&mut out, m.class_id);
            put_u32(&mut out, m.weights.len() + 1);
            put_f32s(&mut out, &m.weights);
            put_f32s(&mut out, &[m.bias]);
        }
        w.section(b"MODL", &out);
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let sections = read_sections(bytes)?;
        let text = std::str::from_utf8(section(&sections, b"CONF")?).map_err(|_| bad("config is not UTF-8"))?;
        let config = Config::parse(text).map_err(|e| bad(format!("config snapshot: {e:#}")))?;
        let names = std::str::from_utf8(section(&sections, b"CLSS")?).map_err(|_| bad("class names are not UTF-8"))?;
        let class_names = names.lines().map(str::to_string).collect();
        let pca = decode_pca(section(&sections, b"PCA ")?)?;
        let gmm = decode_gmm(section(&sections, b"GMM ")?)?;

        let mut r = Reader {
            buf: section(&sections, b"MODL")?,
            what: "MODL",
        };
        let count = r.u32()?;
        let layout = FvLayout::new(r.u32()?, r.u32()?, r.u32()?);
        let mut models = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let class_id = r.u32()?;
            let len = r.u32()?;
            if len != layout.len() + 1 {
                return Err(Error::DimensionMismatch {
                    what: "stored model length",
                    expected: layout.len() + 1,
                    got: len,
                });
            }
            let mut w = r.f32s(len)?;
            let bias = w.pop().expect("len >= 1");
            models.push(LinearModel::new(class_id, layout, w, bias)?);
        }
        r.finish()?;
        let bundle = Self {
            config,
            class_names,
            pca,
            gmm,
            models,
        };
        bundle.check()?;
        Ok(bundle)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> ModelBundle {
        let cfg = Config::parse("D = 2\nK = 2\nR = 1").unwrap();
        let pca = PcaProjection::from_parts(vec![0.1; 4], vec![0.3, 0.1, 0.2, 0.7, 0.5, 0.6, 0.1, 0.2], vec![2.0, 1.0], 2)
            .unwrap();
        let gmm = GmmModel::new(2, 2, vec![0.1, 0.2, -0.3, 0.4], vec![1.1, 0.9, 0.7, 1.3], vec![0.3, 0.7]).unwrap();
        let layout = FvLayout::new(1, 2, 2);
        let models: Vec<LinearModel> = (0..2)
            .map(|c| {
                let w = (0..layout.len()).map(|i| (i as f64 + 0.1 * c as f64).sin() / 3.0).collect();
                LinearModel::new(c, layout, w, -0.123456789).unwrap()
            })
            .collect();
        ModelBundle::new(cfg, vec!["a".into(), "b".into()], &pca, &gmm, &models).unwrap()
    }

    #[test]
    fn reload_is_identical() {
        let b = toy();
        let bytes = b.to_bytes();
        let back = ModelBundle::from_bytes(&bytes).unwrap();
        assert_eq!(back, b);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn corrupt_or_truncated_input_is_rejected() {
        let bytes = toy().to_bytes();
        let mut bad_magic = bytes.clone();
        bad_magic[0] ^= 1;
        assert!(ModelBundle::from_bytes(&bad_magic).is_err());
        let mut bad_version = bytes.clone();
        bad_version[8] = 9;
        assert!(ModelBundle::from_bytes(&bad_version).is_err());
        assert!(ModelBundle::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn loaded_bundle_detects_identically() {
        use crate::synth::{render, SynthSpec};
        use fvdet_core::codebook::fit_gmm;
        use fvdet_core::detector::{detect, generate_candidates, CandidateParams, EncodedImage};
        use fvdet_core::features::extract_patches;
        use fvdet_core::pca::fit_pca;
        use rand::SeedableRng;
        use rand_chacha::ChaCha8Rng;

        let cfg = Config::parse("D = 6\nK = 4\nR = 2\nscales = 3").unwrap();
        let spec = SynthSpec {
            width: 96,
            height: 96,
            min_size: 36,
            max_size: 54,
            ..SynthSpec::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (train, _) = render(&spec, &mut rng);
        let raw: Vec<Vec<f64>> = extract_patches(&train, &cfg.patch_params(), &cfg.descriptor_params())
            .into_iter()
            .map(|p| p.raw)
            .collect();
        let pca = fit_pca(&raw, 6).unwrap();
        let projected: Vec<Vec<f64>> = raw.iter().map(|x| pca.project(x)).collect();
        let gmm = fit_gmm(&projected, 4, 1).unwrap();
        let layout = FvLayout::new(2, 4, 6);
        let models: Vec<LinearModel> = (0..2)
            .map(|c| {
                let w = (0..layout.len()).map(|i| ((i * 7 + c) as f64).sin() / 10.0).collect();
                LinearModel::new(c, layout, w, 0.05).unwrap()
            })
            .collect();
        let saved = ModelBundle::new(cfg, vec!["a".into(), "b".into()], &pca, &gmm, &models).unwrap();
        let loaded = ModelBundle::from_bytes(&saved.to_bytes()).unwrap();

        let (fixture, _) = render(&spec, &mut rng);
        let params = CandidateParams {
            max_candidates: 150,
            min_side: 24,
            ..CandidateParams::default()
        };
        let run = |b: &ModelBundle| {
            let image = EncodedImage {
                encoding: b.pipeline().encode_image(&fixture),
                objects: Vec::new(),
                candidates: generate_candidates(96, 96, &params),
            };
            let refs: Vec<&LinearModel> = b.models.iter().collect();
            detect(&image, &refs, 0.3, true)
        };
        let (a, b) = (run(&saved), run(&loaded));
        assert!(!a.is_empty());
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.window, y.window);
            assert_eq!(x.class_id, y.class_id);
            assert_eq!(x.score.to_bits(), y.score.to_bits());
        }
    }

    #[test]
    fn mismatched_config_is_rejected() {
        let mut b = toy();
        b.config.k = 3;
        assert!(ModelBundle::from_bytes(&b.to_bytes()).is_err());
    }
}
