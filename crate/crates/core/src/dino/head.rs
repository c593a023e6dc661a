use serde::{Deserialize, Serialize};

use crate::nn::{trunc_normal, NnError, ParamStore, Real, Tape, Tensor, Var};
use crate::rng::keyed_rng;
use crate::vit::linear;

pub const DINO_HEAD: &str = "dino_head";
pub const IBOT_HEAD: &str = "ibot_head";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    pub hidden: usize,
    pub bottleneck: usize,
    pub prototypes: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            bottleneck: 32,
            prototypes: 1024,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.prototypes < 2 || self.hidden == 0 || self.bottleneck == 0 {
            return Err(NnError::Shape("head needs >= 2 prototypes and positive widths".into()));
        }
        Ok(())
    }

    pub fn param_shapes(&self, prefix: &str, in_dim: usize) -> Vec<(String, Vec<usize>)> {
        let (h, b) = (self.hidden, self.bottleneck);
        vec![
            (format!("{prefix}.mlp.0.w"), vec![in_dim, h]),
            (format!("{prefix}.mlp.0.b"), vec![1, h]),
            (format!("{prefix}.mlp.1.w"), vec![h, h]),
            (format!("{prefix}.mlp.1.b"), vec![1, h]),
            (format!("{prefix}.mlp.2.w"), vec![h, b]),
            (format!("{prefix}.mlp.2.b"), vec![1, b]),
            (format!("{prefix}.prototypes"), vec![self.prototypes, b]),
        ]
    }
}

pub fn init_head<T: Real>(
    cfg: &HeadConfig,
    prefix: &str,
    in_dim: usize,
    seed: u64,
    store: &mut ParamStore<T>,
) -> Result<(), NnError> {
    cfg.validate()?;
    let mut rng = keyed_rng(seed, &[crate::rng::hash_str(prefix)]);
    for (name, shape) in cfg.param_shapes(prefix, in_dim) {
        let t = if name.ends_with(".b") {
            Tensor::zeros(&shape)
        } else {
            trunc_normal(&mut rng, &shape, 0.02)
        };
        store.insert(name, t);
    }
    Ok(())
}

pub struct HeadOutput {
    /// Unit-norm bottleneck vectors `[B, bottleneck]`.
    pub bottleneck: Var,
    /// Prototype scores `[B, K]`.
    pub logits: Var,
}

/// MLP (GELU) -> l2-normalized bottleneck -> prototype layer with unit-norm rows.
pub fn head_forward<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: Var,
) -> Result<HeadOutput, NnError> {
    let h = linear(tape, store, &format!("{prefix}.mlp.0"), x)?;
    let h = tape.gelu(h)?;
    let h = linear(tape, store, &format!("{prefix}.mlp.1"), h)?;
    let h = tape.gelu(h)?;
    let z = linear(tape, store, &format!("{prefix}.mlp.2"), h)?;
    let z = tape.l2_normalize(z, T::c(1e-12))?;
    let w = tape.param(store, &format!("{prefix}.prototypes"))?;
    let w = tape.l2_normalize(w, T::c(1e-12))?;
    let wt = tape.transpose(w)?;
    let logits = tape.matmul(z, wt)?;
    Ok(HeadOutput { bottleneck: z, logits })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bottleneck_unit_norm_and_logits_bounded() {
        let cfg = HeadConfig {
            hidden: 16,
            bottleneck: 8,
            prototypes: 12,
        };
        let mut store = ParamStore::<f64>::new();
        init_head(&cfg, DINO_HEAD, 6, 1, &mut store).unwrap();
        let mut tape = Tape::no_grad();
        let x = tape
            .constant(Tensor::matrix(3, 6, (0..18).map(|i| (i as f64).cos()).collect()).unwrap())
            .unwrap();
        let out = head_forward(&mut tape, &store, DINO_HEAD, x).unwrap();
        let z = tape.value(out.bottleneck);
        for r in 0..3 {
            let n: f64 = z.row_slice(r).iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
        let l = tape.value(out.logits);
        assert_eq!(l.dims2(), (3, 12));
        assert!(l.data().iter().all(|v| v.abs() <= 1.0 + 1e-12));
    }

    #[test]
    fn too_few_prototypes_rejected() {
        let cfg = HeadConfig {
            prototypes: 1,
            ..HeadConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
