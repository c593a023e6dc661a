//! A small vision transformer producing class and patch tokens on the tape.

use serde::{Deserialize, Serialize};

use crate::nn::{normal, trunc_normal, NnError, ParamStore, Real, Tape, Tensor, Var};
use crate::rng::keyed_rng;

pub const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct VitConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for VitConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
        }
    }
}

impl VitConfig {
    /// ViT-H/14 at 224 pixels.
    pub fn huge() -> Self {
        Self {
            image_size: 224,
            patch_size: 14,
            dim: 1280,
            depth: 32,
            heads: 16,
            mlp_ratio: 4,
        }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn hidden(&self) -> usize {
        self.dim * self.mlp_ratio
    }

    pub fn embedding_len(&self) -> usize {
        2 * self.dim
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(NnError::Shape(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.heads == 0 || self.dim == 0 || self.dim % self.heads != 0 {
            return Err(NnError::Shape(format!("dim {} not divisible by heads {}", self.dim, self.heads)));
        }
        if self.mlp_ratio == 0 {
            return Err(NnError::Shape("mlp_ratio must be positive".into()));
        }
        Ok(())
    }

    /// Closed-form number of scalar parameters.
    pub fn param_count(&self) -> usize {
        let d = self.dim;
        let h = self.hidden();
        let embed = self.patch_dim() * d + d;
        let tokens = d + (self.tokens() + 1) * d + d;
        let block = 2 * d + (d * 3 * d + 3 * d) + (d * d + d) + 2 * d + (d * h + h) + (h * d + d);
        embed + tokens + self.depth * block + 2 * d
    }

    /// Names and shapes of every parameter tensor, in store order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, h) = (self.dim, self.hidden());
        let mut v = vec![
            ("patch_embed.w".to_string(), vec![self.patch_dim(), d]),
            ("patch_embed.b".to_string(), vec![1, d]),
            ("cls_token".to_string(), vec![1, d]),
            ("pos_embed".to_string(), vec![self.tokens() + 1, d]),
            ("mask_token".to_string(), vec![1, d]),
        ];
        for i in 0..self.depth {
            let p = format!("blocks.{i}");
            v.push((format!("{p}.norm1.g"), vec![1, d]));
            v.push((format!("{p}.norm1.b"), vec![1, d]));
            v.push((format!("{p}.attn.qkv.w"), vec![d, 3 * d]));
            v.push((format!("{p}.attn.qkv.b"), vec![1, 3 * d]));
            v.push((format!("{p}.attn.proj.w"), vec![d, d]));
            v.push((format!("{p}.attn.proj.b"), vec![1, d]));
            v.push((format!("{p}.norm2.g"), vec![1, d]));
            v.push((format!("{p}.norm2.b"), vec![1, d]));
            v.push((format!("{p}.mlp.fc1.w"), vec![d, h]));
            v.push((format!("{p}.mlp.fc1.b"), vec![1, h]));
            v.push((format!("{p}.mlp.fc2.w"), vec![h, d]));
            v.push((format!("{p}.mlp.fc2.b"), vec![1, d]));
        }
        v.push(("norm.g".to_string(), vec![1, d]));
        v.push(("norm.b".to_string(), vec![1, d]));
        v
    }
}

/// Insert freshly initialized backbone parameters into `store`.
pub fn init_vit<T: Real>(cfg: &VitConfig, seed: u64, store: &mut ParamStore<T>) -> Result<(), NnError> {
    cfg.validate()?;
    let mut rng = keyed_rng(seed, &[0x7669_74]);
    for (name, shape) in cfg.param_shapes() {
        let t = if name.ends_with(".g") {
            Tensor::full(&shape, T::one())
        } else if name.ends_with(".b") {
            Tensor::zeros(&shape)
        } else if name == "mask_token" {
            normal(&mut rng, &shape, 0.02)
        } else {
            trunc_normal(&mut rng, &shape, 0.02)
        };
        store.insert(name, t);
    }
    Ok(())
}

pub fn new_vit<T: Real>(cfg: &VitConfig, seed: u64) -> Result<ParamStore<T>, NnError> {
    let mut store = ParamStore::new();
    init_vit(cfg, seed, &mut store)?;
    Ok(store)
}

/// `x @ W + b` with parameters `{name}.w` and `{name}.b`.
pub fn linear<T: Real>(tape: &mut Tape<T>, store: &ParamStore<T>, name: &str, x: Var) -> Result<Var, NnError> {
    let w = tape.param(store, &format!("{name}.w"))?;
    let b = tape.param(store, &format!("{name}.b"))?;
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

pub fn norm<T: Real>(tape: &mut Tape<T>, store: &ParamStore<T>, name: &str, x: Var) -> Result<Var, NnError> {
    let g = tape.param(store, &format!("{name}.g"))?;
    let b = tape.param(store, &format!("{name}.b"))?;
    tape.layer_norm(x, g, b, T::c(LN_EPS))
}

/// Patch vectors `[N, 3*p*p]` from a row-major HWC image, each ordered (row, column, channel).
pub fn patchify<T: Real>(image: &[T], size: usize, patch: usize) -> Vec<T> {
    let g = size / patch;
    let mut out = Vec::with_capacity(image.len());
    for py in 0..g {
        for px in 0..g {
            for dy in 0..patch {
                let row = (py * patch + dy) * size + px * patch;
                out.extend_from_slice(&image[row * 3..(row + patch) * 3]);
            }
        }
    }
    out
}

/// Bilinear resampling matrix `[dst*dst, src*src]` for square grids (half-pixel centers).
pub fn grid_resample_matrix(src: usize, dst: usize) -> Vec<f64> {
    let mut axis = vec![0.0; dst * src];
    let s = src as f64 / dst as f64;
    for i in 0..dst {
        let c = ((i as f64 + 0.5) * s - 0.5).clamp(0.0, (src - 1) as f64);
        let lo = c.floor() as usize;
        let hi = (lo + 1).min(src - 1);
        let f = c - lo as f64;
        axis[i * src + lo] += 1.0 - f;
        axis[i * src + hi] += f;
    }
    let mut m = vec![0.0; dst * dst * src * src];
    for yi in 0..dst {
        for xi in 0..dst {
            let row = (yi * dst + xi) * src * src;
            for ys in 0..src {
                let wy = axis[yi * src + ys];
                if wy == 0.0 {
                    continue;
                }
                for xs in 0..src {
                    m[row + ys * src + xs] += wy * axis[xi * src + xs];
                }
            }
        }
    }
    m
}

/// Backbone forward for a batch of equally sized images on the tape.
///
/// Returns `[B*(n+1), D]` with each image's class token first, followed by its
/// `n` patch tokens. Images whose grid differs from the configured one get
/// bilinearly resampled position embeddings.
pub fn vit_tokens<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &VitConfig,
    images: &[&[T]],
    size: usize,
    masks: Option<&[&[bool]]>,
) -> Result<Var, NnError> {
    cfg.validate()?;
    let p = cfg.patch_size;
    if size == 0 || size % p != 0 {
        return Err(NnError::Shape(format!("image size {size} not divisible by patch {p}")));
    }
    if images.is_empty() {
        return Err(NnError::Shape("empty image batch".into()));
    }
    let g = size / p;
    let n = g * g;
    let bsz = images.len();
    let mut patches = Vec::with_capacity(bsz * n * cfg.patch_dim());
    for img in images {
        if img.len() != size * size * 3 {
            return Err(NnError::Shape(format!("image has {} values, expected {}", img.len(), size * size * 3)));
        }
        patches.extend(patchify(img, size, p));
    }
    let x = tape.constant(Tensor::matrix(bsz * n, cfg.patch_dim(), patches)?)?;
    let mut emb = linear(tape, store, "patch_embed", x)?;
    if let Some(masks) = masks {
        if masks.len() != bsz || masks.iter().any(|m| m.len() != n) {
            return Err(NnError::Shape(format!("mask batch must be {bsz} masks of length {n}")));
        }
        if masks.iter().any(|m| m.iter().any(|&b| b)) {
            let flat: Vec<bool> = masks.iter().flat_map(|m| m.iter().copied()).collect();
            let token = tape.param(store, "mask_token")?;
            emb = tape.mask_rows(emb, token, &flat)?;
        }
    }
    let pos = tape.param(store, "pos_embed")?;
    let pos_cls = tape.slice_rows(pos, 0, 1)?;
    let mut pos_patch = tape.slice_rows(pos, 1, cfg.tokens() + 1)?;
    if g != cfg.grid() {
        let m = grid_resample_matrix(cfg.grid(), g).into_iter().map(T::c).collect();
        let m = tape.constant(Tensor::matrix(n, cfg.tokens(), m)?)?;
        pos_patch = tape.matmul(m, pos_patch)?;
    }
    let pos_all = tape.concat_rows(&vec![pos_patch; bsz])?;
    let emb = tape.add(emb, pos_all)?;
    let cls = tape.param(store, "cls_token")?;
    let cls = tape.add(cls, pos_cls)?;
    let mut parts = Vec::with_capacity(2 * bsz);
    for b in 0..bsz {
        parts.push(cls);
        parts.push(tape.slice_rows(emb, b * n, (b + 1) * n)?);
    }
    let mut h = tape.concat_rows(&parts)?;
    let scale = T::c(1.0 / ((cfg.dim / cfg.heads) as f64).sqrt());
    for i in 0..cfg.depth {
        let pre = format!("blocks.{i}");
        let a = norm(tape, store, &format!("{pre}.norm1"), h)?;
        let qkv = linear(tape, store, &format!("{pre}.attn.qkv"), a)?;
        let att = tape.attention(qkv, bsz, n + 1, cfg.heads, scale)?;
        let att = linear(tape, store, &format!("{pre}.attn.proj"), att)?;
        h = tape.add(h, att)?;
        let m = norm(tape, store, &format!("{pre}.norm2"), h)?;
        let m = linear(tape, store, &format!("{pre}.mlp.fc1"), m)?;
        let m = tape.gelu(m)?;
        let m = linear(tape, store, &format!("{pre}.mlp.fc2"), m)?;
        h = tape.add(h, m)?;
    }
    norm(tape, store, "norm", h)
}

/// Row indices of the class tokens in a [`vit_tokens`] output.
pub fn cls_rows(batch: usize, n: usize) -> Vec<usize> {
    (0..batch).map(|b| b * (n + 1)).collect()
}

/// Row indices of the patch tokens of every image, image-major.
pub fn patch_rows(batch: usize, n: usize) -> Vec<usize> {
    (0..batch).flat_map(|b| (1..=n).map(move |j| b * (n + 1) + j)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenOutput<T> {
    pub class_token: Vec<T>,
    /// `[N, D]`.
    pub patch_tokens: Tensor<T>,
}

/// Gradient-free forward of a single image of the configured size.
pub fn vit_forward<T: Real>(
    store: &ParamStore<T>,
    cfg: &VitConfig,
    image: &[T],
    mask: Option<&[bool]>,
) -> Result<TokenOutput<T>, NnError> {
    Ok(vit_forward_batch(store, cfg, &[image], cfg.image_size, mask.map(|m| vec![m]).as_deref())?.remove(0))
}

pub fn vit_forward_batch<T: Real>(
    store: &ParamStore<T>,
    cfg: &VitConfig,
    images: &[&[T]],
    size: usize,
    masks: Option<&[&[bool]]>,
) -> Result<Vec<TokenOutput<T>>, NnError> {
    let mut tape = Tape::no_grad();
    let out = vit_tokens(&mut tape, store, cfg, images, size, masks)?;
    let v = tape.value(out);
    let n = (size / cfg.patch_size).pow(2);
    let d = cfg.dim;
    Ok((0..images.len())
        .map(|b| {
            let base = b * (n + 1);
            TokenOutput {
                class_token: v.row_slice(base).to_vec(),
                patch_tokens: Tensor::matrix(n, d, v.data()[(base + 1) * d..(base + 1 + n) * d].to_vec())
                    .expect("token block"),
            }
        })
        .collect())
}

/// Class token concatenated with the mean patch token.
pub fn extract_embedding<T: Real>(out: &TokenOutput<T>) -> Vec<T> {
    let (n, d) = out.patch_tokens.dims2();
    let mut emb = out.class_token.clone();
    let mut mean = vec![T::zero(); d];
    for r in 0..n {
        for (m, &v) in mean.iter_mut().zip(out.patch_tokens.row_slice(r)) {
            *m = *m + v;
        }
    }
    let inv = T::c(1.0 / n.max(1) as f64);
    emb.extend(mean.into_iter().map(|m| m * inv));
    emb
}
