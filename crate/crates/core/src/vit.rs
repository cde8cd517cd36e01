//! Vision-transformer semantic encoder.
//!
//! Maps an image to a d-dimensional semantic code: patches are linearly
//! projected, a learnable cls token is prepended, learnable 1-D positional
//! embeddings are added, and the cls state after the transformer stack is
//! projected to the code dimension.

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::nn::{push_params, LayerNorm, Linear, NamedParams};
use crate::tensor::{softmax_attention, Element, Tensor};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub code_dim: usize,
}

impl Default for ViTConfig {
    fn default() -> Self {
        // desk-scale defaults; scale code_dim up to 512 to mirror full size
        ViTConfig {
            image_size: 16,
            patch_size: 4,
            in_channels: 3,
            embed_dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4.0,
            code_dim: 64,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "patch size {} must divide image size {}",
                self.patch_size, self.image_size
            )));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "heads {} must divide embed_dim {}",
                self.heads, self.embed_dim
            )));
        }
        if self.depth == 0 || self.code_dim == 0 {
            return Err(Error::Config("depth and code_dim must be positive".into()));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }
}

/// A batch of semantic codes `[B, d]` plus whether they live in the
/// z-scored domain expected by the latent denoiser.
#[derive(Debug, Clone)]
pub struct SemanticCode<T: Element> {
    pub values: Tensor<T>,
    pub normalized: bool,
}

impl<T: Element> SemanticCode<T> {
    pub fn new(values: Tensor<T>, normalized: bool) -> Result<Self> {
        if values.ndim() != 2 {
            return Err(Error::Config(format!(
                "semantic codes must be [B, d], got {:?}",
                values.dims()
            )));
        }
        Ok(SemanticCode { values, normalized })
    }

    pub fn dim(&self) -> usize {
        self.values.dims()[1]
    }

    pub fn len(&self) -> usize {
        self.values.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-dimension mean/std of the training-set codes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CodeStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl CodeStats {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(Error::Config("code stats mean/std length mismatch".into()));
        }
        if std.iter().any(|&s| s <= 0.0 || !s.is_finite()) {
            return Err(Error::Config(
                "code stats require strictly positive, finite std".into(),
            ));
        }
        Ok(CodeStats { mean, std })
    }

    /// Sample moments over a code batch `[N, d]` (std uses n-1).
    pub fn from_codes<T: Element>(codes: &Tensor<T>) -> Result<Self> {
        let dims = codes.shape();
        if dims.len() != 2 || dims[0] < 2 {
            return Err(Error::Config(format!(
                "need at least 2 codes of shape [N, d] to fit stats, got {:?}",
                dims
            )));
        }
        let (n, d) = (dims[0], dims[1]);
        let data = codes.to_f64_vec();
        let mut mean = vec![0.0; d];
        for row in data.chunks(d) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= n as f64;
        }
        let mut var = vec![0.0; d];
        for row in data.chunks(d) {
            for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std: Vec<f64> = var.iter().map(|s| (s / (n - 1) as f64).sqrt()).collect();
        Self::new(mean, std)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Map codes to zero mean and unit variance per dimension.
pub fn normalize_code<T: Element>(
    code: &SemanticCode<T>,
    stats: &CodeStats,
) -> Result<SemanticCode<T>> {
    apply_stats(code, stats, true)
}

/// Inverse of [`normalize_code`].
pub fn unnormalize_code<T: Element>(
    code: &SemanticCode<T>,
    stats: &CodeStats,
) -> Result<SemanticCode<T>> {
    apply_stats(code, stats, false)
}

fn apply_stats<T: Element>(
    code: &SemanticCode<T>,
    stats: &CodeStats,
    forward: bool,
) -> Result<SemanticCode<T>> {
    let d = code.dim();
    if stats.dim() != d {
        return Err(Error::Config(format!(
            "code dim {d} does not match stats dim {}",
            stats.dim()
        )));
    }
    let src = code.values.to_f64_vec();
    let out: Vec<T> = src
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let j = i % d;
            let y = if forward {
                (v - stats.mean[j]) / stats.std[j]
            } else {
                v * stats.std[j] + stats.mean[j]
            };
            T::from_f64(y)
        })
        .collect();
    SemanticCode::new(
        Tensor::from_vec(out, &code.values.shape()).map_err(Error::Tensor)?,
        forward,
    )
}

/// Split an image batch into flattened patch rows, raster-scan order.
///
/// `[B,C,H,W] -> [B, n, C·p²]` (or `[C,H,W] -> [n, C·p²]`); each row is
/// channel-major over the patch pixels.
pub fn patchify<T: Element>(images: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let dims = images.shape();
    let (batched, b, c, h, w) = match dims.len() {
        4 => (true, dims[0], dims[1], dims[2], dims[3]),
        3 => (false, 1, dims[0], dims[1], dims[2]),
        _ => {
            return Err(Error::Config(format!(
                "patchify expects [B,C,H,W] or [C,H,W], got {:?}",
                dims
            )))
        }
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Config(format!(
            "patch size {patch} must divide image extents {h}x{w}"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let n = gh * gw;
    let row_len = c * patch * patch;
    let mut idx = Vec::with_capacity(b * n * row_len);
    for bi in 0..b {
        for gy in 0..gh {
            for gx in 0..gw {
                for ci in 0..c {
                    for py in 0..patch {
                        for px in 0..patch {
                            idx.push(
                                ((bi * c + ci) * h + gy * patch + py) * w + gx * patch + px,
                            );
                        }
                    }
                }
            }
        }
    }
    let out_shape = if batched {
        vec![b, n, row_len]
    } else {
        vec![n, row_len]
    };
    Ok(images.gather_flat(Rc::new(idx), out_shape))
}

struct Block<T: Element> {
    ln1: LayerNorm<T>,
    wqkv: Linear<T>,
    wo: Linear<T>,
    ln2: LayerNorm<T>,
    fc1: Linear<T>,
    fc2: Linear<T>,
    heads: usize,
}

impl<T: Element> Block<T> {
    fn new(dim: usize, heads: usize, mlp_ratio: f64, rng: &mut impl Rng) -> Self {
        let hidden = (dim as f64 * mlp_ratio).round() as usize;
        Block {
            ln1: LayerNorm::new(dim),
            wqkv: Linear::new(dim, 3 * dim, true, rng),
            wo: Linear::new(dim, dim, true, rng),
            ln2: LayerNorm::new(dim),
            fc1: Linear::new(dim, hidden, true, rng),
            fc2: Linear::new(hidden, dim, true, rng),
            heads,
        }
    }

    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let dims = x.shape();
        let (b, n, d) = (dims[0], dims[1], dims[2]);
        let dh = d / self.heads;

        let h = self.ln1.forward(x)?;
        let qkv = self.wqkv.forward(&h)?;
        let split = |off: usize| -> Result<Tensor<T>> {
            Ok(qkv
                .narrow(2, off * d, d)?
                .reshape(&[b, n, self.heads, dh])?
                .permute(&[0, 2, 1, 3])?)
        };
        let (q, k, v) = (split(0)?, split(1)?, split(2)?);
        let att = softmax_attention(&q, &k, &v)?;
        let att = att.permute(&[0, 2, 1, 3])?.reshape(&[b, n, d])?;
        let x = x.add(&self.wo.forward(&att)?)?;

        let h2 = self.ln2.forward(&x)?;
        let mlp = self.fc2.forward(&self.fc1.forward(&h2)?.gelu())?;
        Ok(x.add(&mlp)?)
    }

    fn params(&self) -> NamedParams<T> {
        let mut p = NamedParams::new();
        push_params(&mut p, "ln1", self.ln1.params());
        push_params(&mut p, "wqkv", self.wqkv.params());
        push_params(&mut p, "wo", self.wo.params());
        push_params(&mut p, "ln2", self.ln2.params());
        push_params(&mut p, "fc1", self.fc1.params());
        push_params(&mut p, "fc2", self.fc2.params());
        p
    }
}

/// ViT encoder producing semantic codes from images.
pub struct Vit<T: Element> {
    pub cfg: ViTConfig,
    patch_proj: Linear<T>,
    cls: Tensor<T>,
    pos: Tensor<T>,
    blocks: Vec<Block<T>>,
    final_ln: LayerNorm<T>,
    head: Linear<T>,
}

impl<T: Element> Vit<T> {
    pub fn new(cfg: &ViTConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.num_patches();
        let patch_dim = cfg.in_channels * cfg.patch_size * cfg.patch_size;
        let cls = Tensor::randn_std(&[1, cfg.embed_dim], 0.02, rng);
        let pos = Tensor::randn_std(&[n + 1, cfg.embed_dim], 0.02, rng);
        cls.set_requires_grad(true);
        pos.set_requires_grad(true);
        Ok(Vit {
            cfg: cfg.clone(),
            patch_proj: Linear::new(patch_dim, cfg.embed_dim, true, rng),
            cls,
            pos,
            blocks: (0..cfg.depth)
                .map(|_| Block::new(cfg.embed_dim, cfg.heads, cfg.mlp_ratio, rng))
                .collect(),
            final_ln: LayerNorm::new(cfg.embed_dim),
            head: Linear::new(cfg.embed_dim, cfg.code_dim, true, rng),
        })
    }

    /// Encode a batch `[B,C,H,W]` into codes `[B, d]`.
    pub fn encode(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let dims = images.shape();
        if dims.len() != 4
            || dims[1] != self.cfg.in_channels
            || dims[2] != self.cfg.image_size
            || dims[3] != self.cfg.image_size
        {
            return Err(Error::Config(format!(
                "encoder expects [B,{},{},{}], got {:?}",
                self.cfg.in_channels, self.cfg.image_size, self.cfg.image_size, dims
            )));
        }
        let b = dims[0];
        let tokens = patchify(images, self.cfg.patch_size)?;
        let tokens = self.patch_proj.forward(&tokens)?;
        let cls = self.cls.broadcast_leading(&[b]);
        let x = Tensor::concat(&[&cls, &tokens], 1)?;
        let mut x = x.add(&self.pos.broadcast_leading(&[b]))?;
        for blk in &self.blocks {
            x = blk.forward(&x)?;
        }
        let x = self.final_ln.forward(&x)?;
        let cls_out = x.select(1, 0)?;
        Ok(self.head.forward(&cls_out)?)
    }

    /// Encode into a [`SemanticCode`] (unnormalized domain).
    pub fn encode_codes(&self, images: &Tensor<T>) -> Result<SemanticCode<T>> {
        SemanticCode::new(self.encode(images)?, false)
    }

    pub fn params(&self) -> NamedParams<T> {
        let mut p = NamedParams::new();
        push_params(&mut p, "patch_proj", self.patch_proj.params());
        p.push(("cls".to_string(), self.cls.clone()));
        p.push(("pos".to_string(), self.pos.clone()));
        for (i, blk) in self.blocks.iter().enumerate() {
            push_params(&mut p, &format!("blocks.{i}"), blk.params());
        }
        push_params(&mut p, "final_ln", self.final_ln.params());
        push_params(&mut p, "head", self.head.params());
        p
    }

    /// Zero the positional embeddings (permutation-invariance checks).
    pub fn zero_positional(&self) {
        let mut d = self.pos.data_mut();
        for v in d.iter_mut() {
            *v = T::ZERO;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::from_seed;
    use proptest::prelude::*;

    fn tiny_cfg() -> ViTConfig {
        ViTConfig {
            image_size: 8,
            patch_size: 4,
            in_channels: 3,
            embed_dim: 16,
            depth: 2,
            heads: 2,
            mlp_ratio: 2.0,
            code_dim: 8,
        }
    }

    #[test]
    fn patchify_counts_and_single_patch() {
        let img = Tensor::<f64>::from_fn(&[1, 4, 4], |i| i as f64);
        let p = patchify(&img, 2).unwrap();
        assert_eq!(p.dims(), &[4, 4]);
        // patch = whole image flattens it
        let whole = patchify(&img, 4).unwrap();
        assert_eq!(whole.dims(), &[1, 16]);
        assert_eq!(whole.to_vec(), img.to_vec());
        assert!(patchify(&img, 3).is_err());
    }

    #[test]
    fn patchify_rows_reassemble_exactly() {
        let img = Tensor::<f64>::from_fn(&[3, 8, 8], |i| (i as f64).sin());
        let p = patchify(&img, 4).unwrap();
        assert_eq!(p.dims(), &[4, 48]);
        // inverse-reshape oracle: scatter rows back and compare
        let rows = p.to_vec();
        let mut rebuilt = vec![0.0f64; 3 * 8 * 8];
        for (r, row) in rows.chunks(48).enumerate() {
            let (gy, gx) = (r / 2, r % 2);
            for c in 0..3 {
                for py in 0..4 {
                    for px in 0..4 {
                        rebuilt[(c * 8 + gy * 4 + py) * 8 + gx * 4 + px] =
                            row[c * 16 + py * 4 + px];
                    }
                }
            }
        }
        assert_eq!(rebuilt, img.to_vec());
    }

    #[test]
    fn zero_image_zero_weights_yields_head_bias() {
        let cfg = tiny_cfg();
        let mut rng = from_seed(5);
        let vit = Vit::<f64>::new(&cfg, &mut rng).unwrap();
        for (name, p) in vit.params() {
            let mut d = p.data_mut();
            let fill = if name == "head.b" { 2.5 } else { 0.0 };
            for v in d.iter_mut() {
                *v = fill;
            }
        }
        // with gain = 0 the layernorms zero everything; code = head bias
        let img = Tensor::<f64>::zeros(&[2, 3, 8, 8]);
        let code = vit.encode(&img).unwrap();
        assert!(code.to_vec().iter().all(|&v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn batch_order_independence() {
        let cfg = tiny_cfg();
        let mut rng = from_seed(6);
        let vit = Vit::<f64>::new(&cfg, &mut rng).unwrap();
        let a = Tensor::<f64>::randn(&[1, 3, 8, 8], &mut rng);
        let b = Tensor::<f64>::randn(&[1, 3, 8, 8], &mut rng);
        let pair = Tensor::concat(&[&a, &b], 0).unwrap();
        let joint = vit.encode(&pair).unwrap().to_vec();
        let solo_a = vit.encode(&a).unwrap().to_vec();
        let solo_b = vit.encode(&b).unwrap().to_vec();
        for (x, y) in joint[..8].iter().zip(&solo_a) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in joint[8..].iter().zip(&solo_b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn patch_permutation_invariance_with_zero_positions() {
        let cfg = tiny_cfg();
        let mut rng = from_seed(7);
        let vit = Vit::<f64>::new(&cfg, &mut rng).unwrap();

        let img = Tensor::<f64>::randn(&[1, 3, 8, 8], &mut rng);
        // swap the two left patches with the two right patches (2x2 grid)
        let d = img.to_vec();
        let mut swapped = d.clone();
        for c in 0..3 {
            for y in 0..8 {
                for x in 0..4 {
                    swapped[(c * 8 + y) * 8 + x] = d[(c * 8 + y) * 8 + x + 4];
                    swapped[(c * 8 + y) * 8 + x + 4] = d[(c * 8 + y) * 8 + x];
                }
            }
        }
        let img_sw = Tensor::<f64>::from_vec(swapped, &[1, 3, 8, 8]).unwrap();

        // nonzero positional embeddings: codes differ
        let c1 = vit.encode(&img).unwrap().to_vec();
        let c2 = vit.encode(&img_sw).unwrap().to_vec();
        let diff: f64 = c1.iter().zip(&c2).map(|(a, b)| (a - b).powi(2)).sum();
        assert!(diff > 1e-8, "positional embeddings should break invariance");

        // zero positional embeddings: permutation leaves the code unchanged
        vit.zero_positional();
        let c1 = vit.encode(&img).unwrap().to_vec();
        let c2 = vit.encode(&img_sw).unwrap().to_vec();
        for (a, b) in c1.iter().zip(&c2) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn code_stats_normalize_roundtrip_and_moments() {
        let mut rng = from_seed(8);
        let codes = Tensor::<f64>::randn(&[40, 6], &mut rng).scale(3.0);
        let codes = codes.add(&Tensor::full(&[40, 6], 1.5)).unwrap();
        let stats = CodeStats::from_codes(&codes).unwrap();
        let sc = SemanticCode::new(codes, false).unwrap();
        let norm = normalize_code(&sc, &stats).unwrap();
        assert!(norm.normalized);

        // recomputed-moments oracle on the normalized codes
        let re = CodeStats::from_codes(&norm.values).unwrap();
        for (m, s) in re.mean.iter().zip(&re.std) {
            assert!(m.abs() < 1e-6, "mean {m}");
            assert!((s - 1.0).abs() < 1e-6, "std {s}");
        }

        let back = unnormalize_code(&norm, &stats).unwrap();
        for (a, b) in back.values.to_vec().iter().zip(sc.values.to_vec()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_stats_are_identity() {
        let sc = SemanticCode::new(
            Tensor::<f64>::from_vec(vec![3.0], &[1, 1]).unwrap(),
            false,
        )
        .unwrap();
        let id = CodeStats::new(vec![0.0], vec![1.0]).unwrap();
        assert_eq!(normalize_code(&sc, &id).unwrap().values.to_vec(), vec![3.0]);
        // code [3], mean [1], std [2] -> [1]
        let st = CodeStats::new(vec![1.0], vec![2.0]).unwrap();
        assert_eq!(normalize_code(&sc, &st).unwrap().values.to_vec(), vec![1.0]);
    }

    #[test]
    fn zero_std_is_rejected() {
        assert!(CodeStats::new(vec![0.0], vec![0.0]).is_err());
        assert!(CodeStats::new(vec![0.0], vec![-1.0]).is_err());
    }

    proptest! {
        #[test]
        fn normalize_unnormalize_identity(vals in proptest::collection::vec(-50.0f64..50.0, 4),
                                          mean in proptest::collection::vec(-5.0f64..5.0, 4),
                                          std in proptest::collection::vec(0.1f64..10.0, 4)) {
            let sc = SemanticCode::new(Tensor::<f64>::from_vec(vals.clone(), &[1, 4]).unwrap(), false).unwrap();
            let stats = CodeStats::new(mean, std).unwrap();
            let rt = unnormalize_code(&normalize_code(&sc, &stats).unwrap(), &stats).unwrap();
            for (a, b) in rt.values.to_vec().iter().zip(&vals) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
