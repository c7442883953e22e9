//! A small frozen pre-LN transformer encoder with a merge hook between the
//! attention and MLP halves of every block.

mod data;
mod head;
mod tokens;

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use data::{
    gather, generate_dataset, load_dataset, save_dataset, DatasetParams, SplitManifest, SplitSizes,
    ToyImage, DATASET_FORMAT, DATASET_VERSION,
};
pub use head::{pool_patch_tokens, PrototypeHead};
pub use tokens::TokenMatrix;

use crate::merging::LayerMerge;
use crate::{seed, Error, Result};

/// Row index of the class token in every [`TokenMatrix`] produced here.
pub const CLASS_TOKEN: usize = 0;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub layers: usize,
    pub dim: usize,
    pub patch: usize,
    pub image_size: usize,
    pub channels: usize,
    pub mlp_ratio: usize,
    /// Standard deviation of the positional embeddings. Zero disables them.
    pub pos_scale: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 6,
            dim: 32,
            patch: 8,
            image_size: 32,
            channels: 3,
            mlp_ratio: 4,
            pos_scale: 1.0,
        }
    }
}

impl EncoderConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    /// `N_0`: patch tokens plus the class token.
    pub fn n_tokens(&self) -> usize {
        self.grid() * self.grid() + 1
    }

    pub fn patch_len(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn hidden(&self) -> usize {
        self.dim * self.mlp_ratio
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.dim == 0 || self.patch == 0 || self.channels == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("encoder sizes must be positive".into()));
        }
        if !self.image_size.is_multiple_of(self.patch) {
            return Err(Error::Config(format!(
                "image size {} not divisible by patch {}",
                self.image_size, self.patch
            )));
        }
        if !(self.pos_scale >= 0.0 && self.pos_scale.is_finite()) {
            return Err(Error::Config("pos_scale must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct LayerWeights {
    ln1_scale: DVector<f64>,
    ln1_shift: DVector<f64>,
    w_q: DMatrix<f64>,
    w_k: DMatrix<f64>,
    w_v: DMatrix<f64>,
    w_o: DMatrix<f64>,
    ln2_scale: DVector<f64>,
    ln2_shift: DVector<f64>,
    w_in: DMatrix<f64>,
    b_in: DVector<f64>,
    w_out: DMatrix<f64>,
    b_out: DVector<f64>,
}

/// Frozen encoder parameters, reproducible from `(config, seed)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights {
    config: EncoderConfig,
    seed: u64,
    patch_embed: DMatrix<f64>,
    pos_embed: DMatrix<f64>,
    class_token: DVector<f64>,
    layers: Vec<LayerWeights>,
    final_scale: DVector<f64>,
    final_shift: DVector<f64>,
}

fn gaussian(rng: &mut seed::Rng, rows: usize, cols: usize, std: f64) -> DMatrix<f64> {
    if std == 0.0 {
        return DMatrix::zeros(rows, cols);
    }
    let normal = Normal::new(0.0, std).expect("finite std");
    // Fill row by row so the draw order matches the row-major file layout.
    let data: Vec<f64> = (0..rows * cols).map(|_| normal.sample(rng)).collect();
    DMatrix::from_row_slice(rows, cols, &data)
}

/// Which part of a block a matrix product belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MatmulStage {
    PatchEmbed,
    Attention,
    Mlp,
}

/// One recorded `(m x k) * (k x n)` product.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatmulOp {
    pub layer: Option<usize>,
    pub stage: MatmulStage,
    pub m: usize,
    pub k: usize,
    pub n: usize,
}

struct Probe<'a>(Option<&'a mut Vec<MatmulOp>>);

impl Probe<'_> {
    fn mm(&mut self, a: &DMatrix<f64>, b: &DMatrix<f64>, stage: MatmulStage, layer: Option<usize>) -> DMatrix<f64> {
        if let Some(log) = self.0.as_deref_mut() {
            log.push(MatmulOp {
                layer,
                stage,
                m: a.nrows(),
                k: a.ncols(),
                n: b.ncols(),
            });
        }
        a * b
    }
}

/// Output of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardPass {
    /// `Z_L` after the final layer norm; row 0 is the class token.
    pub tokens: TokenMatrix,
    /// `[N_0, N_1, .., N_L]`.
    pub token_counts: Vec<usize>,
}

impl ForwardPass {
    pub fn final_count(&self) -> usize {
        *self.token_counts.last().expect("at least N_0")
    }
}

fn layer_norm(x: &DMatrix<f64>, scale: &DVector<f64>, shift: &DVector<f64>) -> DMatrix<f64> {
    let (n, d) = x.shape();
    let mut out = DMatrix::zeros(n, d);
    for i in 0..n {
        let row = x.row(i);
        let mean = row.mean();
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for j in 0..d {
            out[(i, j)] = (row[j] - mean) * inv * scale[j] + shift[j];
        }
    }
    out
}

fn softmax_rows(m: &mut DMatrix<f64>) {
    for i in 0..m.nrows() {
        let max = m.row(i).max();
        let mut sum = 0.0;
        for j in 0..m.ncols() {
            let e = (m[(i, j)] - max).exp();
            m[(i, j)] = e;
            sum += e;
        }
        for j in 0..m.ncols() {
            m[(i, j)] /= sum;
        }
    }
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

fn add_row_bias(m: &mut DMatrix<f64>, b: &DVector<f64>) {
    for j in 0..m.ncols() {
        let bj = b[j];
        if bj != 0.0 {
            m.column_mut(j).add_scalar_mut(bj);
        }
    }
}

impl EncoderWeights {
    /// Scaled Gaussian initialisation; never trained.
    pub fn random(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(seed);
        let d = config.dim;
        let h = config.hidden();
        let patch_embed = gaussian(&mut rng, config.patch_len(), d, (1.0 / config.patch_len() as f64).sqrt());
        let pos_embed = gaussian(&mut rng, config.n_tokens(), d, config.pos_scale);
        let class_token = DVector::from_iterator(d, gaussian(&mut rng, 1, d, 0.5).iter().copied());
        let proj_std = (1.0 / d as f64).sqrt();
        let layers = (0..config.layers)
            .map(|_| LayerWeights {
                ln1_scale: DVector::from_element(d, 1.0),
                ln1_shift: DVector::zeros(d),
                w_q: gaussian(&mut rng, d, d, proj_std),
                w_k: gaussian(&mut rng, d, d, proj_std),
                w_v: gaussian(&mut rng, d, d, proj_std),
                w_o: gaussian(&mut rng, d, d, proj_std),
                ln2_scale: DVector::from_element(d, 1.0),
                ln2_shift: DVector::zeros(d),
                w_in: gaussian(&mut rng, d, h, proj_std),
                b_in: DVector::zeros(h),
                w_out: gaussian(&mut rng, h, d, (1.0 / h as f64).sqrt()),
                b_out: DVector::zeros(d),
            })
            .collect();
        Ok(Self {
            config,
            seed,
            patch_embed,
            pos_embed,
            class_token,
            layers,
            final_scale: DVector::from_element(d, 1.0),
            final_shift: DVector::zeros(d),
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n_layers(&self) -> usize {
        self.config.layers
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    /// `Z_0 = E(x)`: class token in row 0, then patches in raster order.
    pub fn patch_embed(&self, img: &ToyImage) -> Result<TokenMatrix> {
        self.embed(img, &mut Probe(None))
    }

    fn embed(&self, img: &ToyImage, probe: &mut Probe<'_>) -> Result<TokenMatrix> {
        let c = &self.config;
        if img.height != c.image_size || img.width != c.image_size || img.channels != c.channels {
            return Err(Error::Shape(format!(
                "image is {}x{}x{}, encoder expects {}x{}x{}",
                img.height, img.width, img.channels, c.image_size, c.image_size, c.channels
            )));
        }
        let grid = c.grid();
        let mut patches = DMatrix::zeros(grid * grid, c.patch_len());
        for gy in 0..grid {
            for gx in 0..grid {
                for (j, v) in img.patch(gy, gx, c.patch).into_iter().enumerate() {
                    // [0, 1] pixels mapped to [-1, 1]
                    patches[(gy * grid + gx, j)] = 2.0 * v - 1.0;
                }
            }
        }
        let embedded = probe.mm(&patches, &self.patch_embed, MatmulStage::PatchEmbed, None);
        let mut z = DMatrix::zeros(c.n_tokens(), c.dim);
        z.row_mut(CLASS_TOKEN).copy_from(&self.class_token.transpose());
        z.rows_mut(1, grid * grid).copy_from(&embedded);
        z += &self.pos_embed;
        TokenMatrix::unit(z, 0)
    }

    /// Runs all blocks, calling `merge` between attention and MLP of each.
    pub fn forward(&self, img: &ToyImage, merge: &dyn LayerMerge) -> Result<ForwardPass> {
        self.run(img, merge, &mut Probe(None))
    }

    /// Like [`forward`](Self::forward) but records every matrix product.
    pub fn forward_instrumented(
        &self,
        img: &ToyImage,
        merge: &dyn LayerMerge,
        log: &mut Vec<MatmulOp>,
    ) -> Result<ForwardPass> {
        self.run(img, merge, &mut Probe(Some(log)))
    }

    fn run(&self, img: &ToyImage, merge: &dyn LayerMerge, probe: &mut Probe<'_>) -> Result<ForwardPass> {
        if let Some(n) = merge.layers() {
            if n != self.config.layers {
                return Err(Error::Shape(format!(
                    "merge schedule covers {n} layers, encoder has {}",
                    self.config.layers
                )));
            }
        }
        let mut z = self.embed(img, probe)?;
        let mut counts = Vec::with_capacity(self.config.layers + 1);
        counts.push(z.n_tokens());
        let scale = 1.0 / (self.config.dim as f64).sqrt();
        for (l, w) in self.layers.iter().enumerate() {
            let layer = Some(l);
            let x = layer_norm(z.tokens(), &w.ln1_scale, &w.ln1_shift);
            let q = probe.mm(&x, &w.w_q, MatmulStage::Attention, layer);
            let k = probe.mm(&x, &w.w_k, MatmulStage::Attention, layer);
            let v = probe.mm(&x, &w.w_v, MatmulStage::Attention, layer);
            let mut scores = probe.mm(&q, &k.transpose(), MatmulStage::Attention, layer);
            scores *= scale;
            softmax_rows(&mut scores);
            let heads = probe.mm(&scores, &v, MatmulStage::Attention, layer);
            let attn = probe.mm(&heads, &w.w_o, MatmulStage::Attention, layer);
            let attended = z.tokens() + attn;
            let z_att = z.with_tokens(attended)?;

            let merged = merge.merge(l, z_att, &v)?;
            let z_m = merged.tokens;

            let x2 = layer_norm(z_m.tokens(), &w.ln2_scale, &w.ln2_shift);
            let mut hidden = probe.mm(&x2, &w.w_in, MatmulStage::Mlp, layer);
            add_row_bias(&mut hidden, &w.b_in);
            hidden.apply(|v| *v = gelu(*v));
            let mut out = probe.mm(&hidden, &w.w_out, MatmulStage::Mlp, layer);
            add_row_bias(&mut out, &w.b_out);
            let next = z_m.tokens() + out;
            z = z_m.with_tokens(next)?.with_layer_index(l + 1);
            counts.push(z.n_tokens());
        }
        let normed = layer_norm(z.tokens(), &self.final_scale, &self.final_shift);
        Ok(ForwardPass {
            tokens: z.with_tokens(normed)?,
            token_counts: counts,
        })
    }

    fn tensors(&self) -> BTreeMap<String, Tensor> {
        let mut t = BTreeMap::new();
        t.insert("patch_embed".into(), Tensor::from(&self.patch_embed));
        t.insert("pos_embed".into(), Tensor::from(&self.pos_embed));
        t.insert("class_token".into(), Tensor::from_vec(&self.class_token));
        t.insert("final_scale".into(), Tensor::from_vec(&self.final_scale));
        t.insert("final_shift".into(), Tensor::from_vec(&self.final_shift));
        for (l, w) in self.layers.iter().enumerate() {
            let mut put = |name: &str, m: Tensor| {
                t.insert(format!("layers.{l}.{name}"), m);
            };
            put("ln1_scale", Tensor::from_vec(&w.ln1_scale));
            put("ln1_shift", Tensor::from_vec(&w.ln1_shift));
            put("w_q", Tensor::from(&w.w_q));
            put("w_k", Tensor::from(&w.w_k));
            put("w_v", Tensor::from(&w.w_v));
            put("w_o", Tensor::from(&w.w_o));
            put("ln2_scale", Tensor::from_vec(&w.ln2_scale));
            put("ln2_shift", Tensor::from_vec(&w.ln2_shift));
            put("w_in", Tensor::from(&w.w_in));
            put("b_in", Tensor::from_vec(&w.b_in));
            put("w_out", Tensor::from(&w.w_out));
            put("b_out", Tensor::from_vec(&w.b_out));
        }
        t
    }

    /// Writes a versioned JSON weights file (row-major tensors keyed by name).
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = WeightsFile {
            format: WEIGHTS_FORMAT.into(),
            version: WEIGHTS_VERSION,
            config: self.config,
            seed: self.seed,
            tensors: self.tensors(),
        };
        std::fs::write(path, serde_json::to_string(&file)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: WeightsFile = serde_json::from_str(&text)?;
        if file.format != WEIGHTS_FORMAT || file.version != WEIGHTS_VERSION {
            return Err(Error::Config(format!(
                "unsupported weights file {} v{}",
                file.format, file.version
            )));
        }
        file.config.validate()?;
        let c = file.config;
        let (d, h) = (c.dim, c.hidden());
        let get = |name: &str, rows: usize, cols: usize| -> Result<DMatrix<f64>> {
            let t = file
                .tensors
                .get(name)
                .ok_or_else(|| Error::Config(format!("weights file lacks tensor {name}")))?;
            t.to_matrix(name, rows, cols)
        };
        let vec = |name: &str, len: usize| -> Result<DVector<f64>> {
            Ok(DVector::from_iterator(len, get(name, len, 1)?.iter().copied()))
        };
        let layers = (0..c.layers)
            .map(|l| {
                let p = |n: &str| format!("layers.{l}.{n}");
                Ok(LayerWeights {
                    ln1_scale: vec(&p("ln1_scale"), d)?,
                    ln1_shift: vec(&p("ln1_shift"), d)?,
                    w_q: get(&p("w_q"), d, d)?,
                    w_k: get(&p("w_k"), d, d)?,
                    w_v: get(&p("w_v"), d, d)?,
                    w_o: get(&p("w_o"), d, d)?,
                    ln2_scale: vec(&p("ln2_scale"), d)?,
                    ln2_shift: vec(&p("ln2_shift"), d)?,
                    w_in: get(&p("w_in"), d, h)?,
                    b_in: vec(&p("b_in"), h)?,
                    w_out: get(&p("w_out"), h, d)?,
                    b_out: vec(&p("b_out"), d)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: c,
            seed: file.seed,
            patch_embed: get("patch_embed", c.patch_len(), d)?,
            pos_embed: get("pos_embed", c.n_tokens(), d)?,
            class_token: vec("class_token", d)?,
            layers,
            final_scale: vec("final_scale", d)?,
            final_shift: vec("final_shift", d)?,
        })
    }
}

pub const WEIGHTS_FORMAT: &str = "tokmerge-weights";
pub const WEIGHTS_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct WeightsFile {
    format: String,
    version: u32,
    config: EncoderConfig,
    seed: u64,
    tensors: BTreeMap<String, Tensor>,
}

#[derive(Serialize, Deserialize)]
struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    fn from(m: &DMatrix<f64>) -> Self {
        let mut data = Vec::with_capacity(m.len());
        for i in 0..m.nrows() {
            data.extend(m.row(i).iter());
        }
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            data,
        }
    }

    fn from_vec(v: &DVector<f64>) -> Self {
        Self {
            rows: v.len(),
            cols: 1,
            data: v.iter().copied().collect(),
        }
    }

    fn to_matrix(&self, name: &str, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
        if self.rows != rows || self.cols != cols || self.data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "tensor {name} is {}x{}, expected {rows}x{cols}",
                self.rows, self.cols
            )));
        }
        Ok(DMatrix::from_row_slice(rows, cols, &self.data))
    }
}
