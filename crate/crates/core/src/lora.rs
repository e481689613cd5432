//! Low-rank adapters: attach, evaluate, merge, count. An adapter keeps the
//! base weight frozen and adds scale * A * B on top.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::denoiser::DenoiserParams;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{matmul, Tensor};

#[derive(Clone, Debug)]
pub struct LoraAdapter<S> {
    /// name of the base weight W of shape d x k
    pub target: String,
    /// d x r
    pub a: Tensor<S>,
    /// r x k, all-zero at creation
    pub b: Tensor<S>,
    pub rank: usize,
    pub scale: S,
}

pub type AdapterSet<S> = BTreeMap<String, LoraAdapter<S>>;

/// Attach adapters to named 2-D weights. A is seeded-random small-variance,
/// B is zero, so the adapted forward equals the base forward at attach time.
pub fn attach_lora<S: Scalar>(
    params: &DenoiserParams<S>,
    rank: usize,
    targets: &[String],
    seed: u64,
) -> Result<AdapterSet<S>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f64, 0.02).unwrap();
    let mut set = AdapterSet::new();
    for target in targets {
        let w = params.tensors.get(target).ok_or_else(|| Error::Key(target.clone()))?;
        if w.shape().len() != 2 {
            return Err(Error::config(format!("target {target} is not a 2-D weight")));
        }
        let (d, k) = (w.shape()[0], w.shape()[1]);
        if rank == 0 || rank > d.min(k) / 2 {
            return Err(Error::config(format!(
                "rank {rank} too large for {target} ({d}x{k}); need 1 <= r <= min(d,k)/2"
            )));
        }
        let a = Tensor::new(
            &[d, rank],
            (0..d * rank).map(|_| S::from_f64_(normal.sample(&mut rng))).collect(),
        );
        set.insert(
            target.clone(),
            LoraAdapter { target: target.clone(), a, b: Tensor::zeros(&[rank, k]), rank, scale: S::one() },
        );
    }
    Ok(set)
}

/// y = (W + scale * A * B) x without materializing W'.
pub fn lora_forward<S: Scalar>(w: &Tensor<S>, adapter: &LoraAdapter<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
    let (d, k) = (w.shape()[0], w.shape()[1]);
    if adapter.a.shape() != [d, adapter.rank] || adapter.b.shape() != [adapter.rank, k] {
        return Err(Error::geometry("adapter factors do not compose with W"));
    }
    if x.shape()[0] != k {
        return Err(Error::geometry(format!("x has {} rows, W has {k} columns", x.shape()[0])));
    }
    let xm = if x.shape().len() == 1 { x.reshaped(&[k, 1]) } else { x.clone() };
    let base = matmul(w, &xm);
    let low = matmul(&adapter.a, &matmul(&adapter.b, &xm)).scale(adapter.scale);
    let y = base.add(&low);
    Ok(if x.shape().len() == 1 { y.reshaped(&[d]) } else { y })
}

/// Dense W + scale * A * B; the original W is untouched.
pub fn merge_lora<S: Scalar>(w: &Tensor<S>, adapter: &LoraAdapter<S>) -> Result<Tensor<S>> {
    let (d, k) = (w.shape()[0], w.shape()[1]);
    if adapter.a.shape() != [d, adapter.rank] || adapter.b.shape() != [adapter.rank, k] {
        return Err(Error::geometry("adapter factors do not compose with W"));
    }
    Ok(w.add(&matmul(&adapter.a, &adapter.b).scale(adapter.scale)))
}

/// Trainable parameter count: sum over adapters of r * (d + k).
pub fn count_trainable<S: Scalar>(adapters: &AdapterSet<S>) -> usize {
    adapters
        .values()
        .map(|ad| {
            let d = ad.a.shape()[0];
            let k = ad.b.shape()[1];
            ad.rank * (d + k)
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{init_denoiser, DenoiserArch};
    use proptest::prelude::*;
    use rand::Rng;

    fn params() -> DenoiserParams<f64> {
        init_denoiser(
            &DenoiserArch::tiny(),
            &["band:red".into(), "band:nir".into(), "site:a".into()],
            7,
        )
        .unwrap()
    }

    #[test]
    fn attach_is_deterministic_and_zero_init() {
        let p = params();
        let targets: Vec<String> = p.lora_default_targets();
        assert!(!targets.is_empty());
        let a = attach_lora(&p, 2, &targets, 3).unwrap();
        let b = attach_lora(&p, 2, &targets, 3).unwrap();
        for t in &targets {
            assert_eq!(a[t].a, b[t].a);
            assert!(a[t].b.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn attach_rejects_bad_inputs() {
        let p = params();
        let targets = p.lora_default_targets();
        assert!(matches!(attach_lora(&p, 2, &["nope.w".into()], 0), Err(Error::Key(_))));
        let w = &p.tensors[&targets[0]];
        let too_big = w.shape()[0].min(w.shape()[1]) / 2 + 1;
        assert!(attach_lora(&p, too_big, &targets, 0).is_err());
    }

    #[test]
    fn hand_worked_rank_one_product() {
        let w = Tensor::<f64>::zeros(&[2, 2]);
        let adapter = LoraAdapter {
            target: "w".into(),
            a: Tensor::new(&[2, 1], vec![1.0, 2.0]),
            b: Tensor::new(&[1, 2], vec![3.0, 4.0]),
            rank: 1,
            scale: 1.0,
        };
        let merged = merge_lora(&w, &adapter).unwrap();
        assert_eq!(merged.data(), &[3.0, 4.0, 6.0, 8.0]);
        let y = lora_forward(&w, &adapter, &Tensor::new(&[2], vec![1.0, 0.0])).unwrap();
        assert_eq!(y.data(), &[3.0, 6.0]);
    }

    #[test]
    fn zero_b_is_base_forward() {
        let w = Tensor::new(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let adapter = LoraAdapter {
            target: "w".into(),
            a: Tensor::new(&[3, 1], vec![9.0, 9.0, 9.0]),
            b: Tensor::zeros(&[1, 2]),
            rank: 1,
            scale: 1.0,
        };
        let x = Tensor::new(&[2], vec![0.5, -1.0]);
        let y = lora_forward(&w, &adapter, &x).unwrap();
        assert_eq!(y.data(), &[-1.5, -2.5, -3.5]);
    }

    #[test]
    fn merge_scale_zero_is_w() {
        let w = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let adapter = LoraAdapter {
            target: "w".into(),
            a: Tensor::new(&[2, 1], vec![1.0, 1.0]),
            b: Tensor::new(&[1, 2], vec![1.0, 1.0]),
            rank: 1,
            scale: 0.0,
        };
        assert_eq!(merge_lora(&w, &adapter).unwrap().data(), w.data());
    }

    #[test]
    fn merged_minus_w_is_scaled_ab() {
        let w = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let adapter = LoraAdapter {
            target: "w".into(),
            a: Tensor::new(&[2, 1], vec![1.0, 2.0]),
            b: Tensor::new(&[1, 2], vec![3.0, 4.0]),
            rank: 1,
            scale: 0.5,
        };
        let merged = merge_lora(&w, &adapter).unwrap();
        let diff = merged.sub(&w);
        assert_eq!(diff.data(), &[1.5, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn merged_matches_basis_probing() {
        // apply the low-rank path to identity basis vectors and compare
        // against the dense merge, column by column
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (d, k, r) = (6, 5, 2);
        let w = Tensor::new(&[d, k], (0..d * k).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let adapter = LoraAdapter {
            target: "w".into(),
            a: Tensor::new(&[d, r], (0..d * r).map(|_| rng.gen_range(-1.0..1.0)).collect()),
            b: Tensor::new(&[r, k], (0..r * k).map(|_| rng.gen_range(-1.0..1.0)).collect()),
            rank: r,
            scale: 0.7,
        };
        let merged = merge_lora(&w, &adapter).unwrap();
        let mut frob = 0.0f64;
        for j in 0..k {
            let mut e = Tensor::<f64>::zeros(&[k]);
            e.data_mut()[j] = 1.0;
            let col = lora_forward(&w, &adapter, &e).unwrap();
            for i in 0..d {
                let diff = merged.data()[i * k + j] - col.data()[i];
                frob += diff * diff;
            }
        }
        assert!(frob.sqrt() < 1e-6);
    }

    #[test]
    fn count_trainable_values() {
        let mut set = AdapterSet::new();
        assert_eq!(count_trainable::<f64>(&set), 0);
        set.insert(
            "w".into(),
            LoraAdapter {
                target: "w".into(),
                a: Tensor::zeros(&[64, 4]),
                b: Tensor::zeros(&[4, 64]),
                rank: 4,
                scale: 1.0,
            },
        );
        assert_eq!(count_trainable(&set), 512);
        // 12.5% of a full fine-tune of the same 64x64 target
        assert_eq!(512.0 / (64.0 * 64.0), 0.125);
    }

    proptest! {
        #[test]
        fn merged_and_decomposed_paths_agree(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = rng.gen_range(2usize..12);
            let k = rng.gen_range(2usize..12);
            let r = rng.gen_range(1usize..=(d.min(k) / 2).max(1));
            let w = Tensor::<f64>::new(&[d, k], (0..d * k).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let adapter = LoraAdapter {
                target: "w".into(),
                a: Tensor::new(&[d, r], (0..d * r).map(|_| rng.gen_range(-1.0..1.0)).collect()),
                b: Tensor::new(&[r, k], (0..r * k).map(|_| rng.gen_range(-1.0..1.0)).collect()),
                rank: r,
                scale: rng.gen_range(0.0..2.0),
            };
            let x = Tensor::new(&[k], (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let low = lora_forward(&w, &adapter, &x).unwrap();
            let merged = matmul(&merge_lora(&w, &adapter).unwrap(), &x.reshaped(&[k, 1])).reshaped(&[d]);
            for (a, b) in low.data().iter().zip(merged.data()) {
                let denom = a.abs().max(b.abs()).max(1e-9);
                prop_assert!(((a - b) / denom).abs() < 1e-6);
            }
        }
    }
}
