//! Finite-difference checks of every differentiable piece: tape primitives,
//! the affine sampler, both losses, and the full model objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::exec::{self, Exec};
use crate::losses::{self, LossConfig};
use crate::model::{EpanModel, Mode, ModelConfig};
use crate::tensor::{grad_check_indices, CeVariant, NormMode, Tape, Tensor, Var};

pub const PRIMITIVE_TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-3;
pub const FD_EPS: f64 = 1e-6;
/// The full model is piecewise smooth with thousands of kinks (relu units,
/// bilinear cell edges); a narrower step rarely straddles one.
pub const MODEL_FD_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub seeds: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

type Objective = Box<dyn Fn(&mut Tape, Var) -> Result<Var> + Sync + Send>;

struct Case {
    input: Tensor,
    f: Objective,
    /// Probed coordinates; `None` checks all of them.
    probe: Option<Vec<usize>>,
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Values whose magnitude stays at least `gap` away from zero, keeping relu
/// and max-pool away from their kinks.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(gap..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Random projection onto a scalar: `sum(y * r)`.
fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let r = randn(&mut rng, tape.shape(y));
    let r = tape.constant(r);
    let p = tape.mul(y, r)?;
    Ok(tape.sum(p))
}

fn case(input: Tensor, f: impl Fn(&mut Tape, Var) -> Result<Var> + Sync + Send + 'static) -> Case {
    Case {
        input,
        f: Box::new(f),
        probe: None,
    }
}

type Builder = fn(u64) -> Case;

fn primitive_cases() -> Vec<(&'static str, Builder)> {
    vec![
        ("conv2d.input", |s| {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            let k = randn(&mut r, &[3, 2, 3, 3]);
            let b = randn(&mut r, &[3]);
            case(randn(&mut r, &[2, 2, 5, 6]), move |t, x| {
                let (k, b) = (t.constant(k.clone()), t.constant(b.clone()));
                let y = t.conv2d(x, k, Some(b), 2, 1)?;
                project(t, y, s)
            })
        }),
        ("conv2d.kernel", |s| {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            let x = randn(&mut r, &[2, 2, 5, 5]);
            case(randn(&mut r, &[3, 2, 3, 3]), move |t, k| {
                let x = t.constant(x.clone());
                let y = t.conv2d(x, k, None, 1, 1)?;
                project(t, y, s)
            })
        }),
        ("conv2d.bias", |s| {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            let x = randn(&mut r, &[2, 2, 4, 4]);
            let k = randn(&mut r, &[3, 2, 1, 1]);
            case(randn(&mut r, &[3]), move |t, b| {
                let (x, k) = (t.constant(x.clone()), t.constant(k.clone()));
                let y = t.conv2d(x, k, Some(b), 1, 0)?;
                project(t, y, s)
            })
        }),
        ("relu", |s| {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            case(away_from_zero(&mut r, &[4, 7], 0.01), move |t, x| {
                let y = t.relu(x);
                project(t, y, s)
            })
        }),
        ("linear.input", |s| {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            let w = randn(&mut r, &[4, 5]);
            let b = randn(&mut r, &[4]);
            case(randn(&mut r, &[3, 5]), move |t, x| {
                let (w, b) = (t.constant(w.clone()), t.constant(b.clone()));
                let y = t.linear(x, w, Some(b))?;
                project(t, y, s)
            })
        }),
        ("linear.weight", |s| {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            let x = randn(&mut r, &[3, 5]);
            case(randn(&mut r, &[4, 5]), move |t, w| {
                let x = t.constant(x.clone());
                let y = t.linear(x, w, None)?;
                project(t, y, s)
            })
        }),
        ("linear.bias", |s| {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            let x = randn(&mut r, &[3, 5]);
            let w = randn(&mut r, &[4, 5]);
            case(randn(&mut r, &[4]), move |t, b| {
                let (x, w) = (t.constant(x.clone()), t.constant(w.clone()));
                let y = t.linear(x, w, Some(b))?;
                project(t, y, s)
            })
        }),
        ("avg_pool", |s| {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            case(randn(&mut r, &[2, 2, 4, 6]), move |t, x| {
                let y = t.avg_pool(x, 2)?;
                project(t, y, s)
            })
        }),
        ("max_pool", |s| {
            // A permutation of well-separated levels: no ties within 2 eps.
            let mut r = ChaCha8Rng::seed_from_u64(s);
            let n = 2 * 2 * 4 * 6;
            let mut levels: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
            for i in (1..n).rev() {
                levels.swap(i, r.random_range(0..=i));
            }
            case(Tensor::new(&[2, 2, 4, 6], levels).unwrap(), move |t, x| {
                let y = t.max_pool(x, 2)?;
                project(t, y, s)
            })
        }),
        ("global_avg_pool", |s| {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            case(randn(&mut r, &[2, 3, 3, 4]), move |t, x| {
                let y = t.global_avg_pool(x)?;
                project(t, y, s)
            })
        }),
        ("batch_norm.input", |s| {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            let g = randn(&mut r, &[3]);
            let b = randn(&mut r, &[3]);
            case(randn(&mut r, &[4, 3, 2, 2]), move |t, x| {
                let (g, b) = (t.constant(g.clone()), t.constant(b.clone()));
                let (y, _) = t.batch_norm(x, g, b, NormMode::Batch)?;
                project(t, y, s)
            })
        }),
        ("batch_norm.gamma", |s| {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            let x = randn(&mut r, &[4, 3, 2, 2]);
            let b = randn(&mut r, &[3]);
            case(randn(&mut r, &[3]), move |t, g| {
                let (x, b) = (t.constant(x.clone()), t.constant(b.clone()));
                let (y, _) = t.batch_norm(x, g, b, NormMode::Batch)?;
                project(t, y, s)
            })
        }),
        ("batch_norm.beta", |s| {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            let x = randn(&mut r, &[4, 3, 2, 2]);
            let g = randn(&mut r, &[3]);
            case(randn(&mut r, &[3]), move |t, b| {
                let (x, g) = (t.constant(x.clone()), t.constant(g.clone()));
                let (y, _) = t.batch_norm(x, g, b, NormMode::Batch)?;
                project(t, y, s)
            })
        }),
        ("instance_norm.input", |s| {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            let g = randn(&mut r, &[3]);
            let b = randn(&mut r, &[3]);
            case(randn(&mut r, &[2, 3, 3, 3]), move |t, x| {
                let (g, b) = (t.constant(g.clone()), t.constant(b.clone()));
                let y = t.instance_norm(x, g, b)?;
                project(t, y, s)
            })
        }),
        ("instance_norm.gamma", |s| {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            let x = randn(&mut r, &[2, 3, 3, 3]);
            let b = randn(&mut r, &[3]);
            case(randn(&mut r, &[3]), move |t, g| {
                let (x, b) = (t.constant(x.clone()), t.constant(b.clone()));
                let y = t.instance_norm(x, g, b)?;
                project(t, y, s)
            })
        }),
        ("softmax", |s| {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            case(randn(&mut r, &[3, 5]), move |t, x| {
                let y = t.softmax(x);
                project(t, y, s)
            })
        }),
        ("add", |s| {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            let o = randn(&mut r, &[3, 4]);
            case(randn(&mut r, &[3, 4]), move |t, x| {
                let o = t.constant(o.clone());
                let y = t.add(o, x)?;
                project(t, y, s)
            })
        }),
        ("sub", |s| {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            let o = randn(&mut r, &[3, 4]);
            case(randn(&mut r, &[3, 4]), move |t, x| {
                let o = t.constant(o.clone());
                let y = t.sub(o, x)?;
                project(t, y, s)
            })
        }),
        ("mul", |s| {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            let o = randn(&mut r, &[3, 4]);
            case(randn(&mut r, &[3, 4]), move |t, x| {
                let o = t.constant(o.clone());
                let y = t.mul(x, o)?;
                project(t, y, s)
            })
        }),
        ("concat", |s| {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            let o = randn(&mut r, &[2, 3, 2, 2]);
            case(randn(&mut r, &[2, 1, 2, 2]), move |t, x| {
                let o = t.constant(o.clone());
                let y = t.concat(&[o, x], 1)?;
                project(t, y, s)
            })
        }),
        ("l2_normalize", |s| {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            case(randn(&mut r, &[3, 4]), move |t, x| {
                let y = t.l2_normalize(x);
                project(t, y, s)
            })
        }),
        ("sampler.input", |s| {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            let th = random_theta(&mut r, 2);
            case(randn(&mut r, &[2, 2, 5, 6]), move |t, x| {
                let th = t.constant(th.clone());
                let grid = t.affine_grid(th, 4, 5)?;
                let y = t.grid_sample(x, grid)?;
                project(t, y, s)
            })
        }),
        ("sampler.theta", |s| {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            let img = randn(&mut r, &[2, 2, 5, 6]);
            case(random_theta(&mut r, 2), move |t, th| {
                let img = t.constant(img.clone());
                let grid = t.affine_grid(th, 4, 5)?;
                let y = t.grid_sample(img, grid)?;
                project(t, y, s)
            })
        }),
        ("cross_entropy.smoothed", |s| {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            let targets: Vec<usize> = (0..4).map(|_| r.random_range(0..5)).collect();
            case(randn(&mut r, &[4, 5]), move |t, x| {
                losses::lsr_cross_entropy(t, x, &targets, 0.1, CeVariant::SmoothedTargets)
            })
        }),
        ("cross_entropy.log_shift", |s| {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            let targets: Vec<usize> = (0..4).map(|_| r.random_range(0..5)).collect();
            case(randn(&mut r, &[4, 5]), move |t, x| {
                losses::lsr_cross_entropy(t, x, &targets, 0.1, CeVariant::LogShift)
            })
        }),
        ("triplet.squared", |s| {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            case(randn(&mut r, &[6, 4]), move |t, x| {
                losses::batch_hard_triplet(t, x, &[0, 0, 1, 1, 2, 2], 2.0, true)
            })
        }),
        ("triplet.euclidean", |s| {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            case(randn(&mut r, &[6, 4]), move |t, x| {
                losses::batch_hard_triplet(t, x, &[0, 0, 1, 1, 2, 2], 1.0, false)
            })
        }),
    ]
}

fn random_theta(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    Tensor::from_fn(&[n, 6], |i| {
        let base = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0][i % 6];
        base + rng.random_range(-0.3..0.3)
    })
}

/// Toy model used by the full-objective check.
pub fn toy_model_config() -> ModelConfig {
    ModelConfig {
        input_h: 16,
        input_w: 16,
        stage_channels: [3, 4, 4, 5],
        num_classes: 3,
        embed_dim: 4,
        grid_channels: 3,
        ..ModelConfig::default()
    }
}

/// Parameters probed per tensor in the full-model check.
const MODEL_PROBES: usize = 2;

/// Builds one finite-difference case per model parameter tensor: the total
/// loss of a train-mode pass as a function of that tensor.
fn model_cases(seed: u64, ibn: bool) -> Vec<(String, Case)> {
    let cfg = ModelConfig {
        ibn_enabled: ibn,
        ..toy_model_config()
    };
    let mut model = EpanModel::new(cfg, seed).expect("toy config is valid");
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    // A fresh grid head regresses exactly the identity, whose sampling grid
    // sits on pixel centers where bilinear interpolation has kinks. The last
    // stage is 1x1 here, so a sample can lose every pooled feature to relu;
    // its embedding is then the bias, and normalizing a zero bias is singular.
    for (k, v) in model.state.params.iter_mut() {
        let spread = if k.starts_with("grid.fc") {
            0.05
        } else if k.ends_with("embed.b") {
            0.5
        } else {
            continue;
        };
        for x in v.data_mut() {
            *x += r.random_range(-spread..spread);
        }
    }
    let images: Vec<Tensor> = (0..6).map(|_| randn(&mut r, &[3, 16, 16])).collect();
    let targets = vec![0, 0, 1, 1, 2, 2];
    let loss_cfg = LossConfig {
        margin: 5.0,
        ..LossConfig::default()
    };
    let names: Vec<String> = model.state.params.keys().cloned().collect();
    names
        .into_iter()
        .map(|name| {
            let input = model.state.params[&name].clone();
            let n = input.numel();
            let probe: Vec<usize> = (0..MODEL_PROBES.min(n)).map(|_| r.random_range(0..n)).collect();
            let (m, imgs, tg, key) = (model.clone(), images.clone(), targets.clone(), name.clone());
            let f = move |t: &mut Tape, p: Var| -> Result<Var> {
                let vars = m.register(t, false).with_override(&key, p);
                let refs: Vec<&Tensor> = imgs.iter().collect();
                let x = t.constant(Tensor::stack(&refs)?);
                let mut ctx = m.ctx(t, &vars, Mode::Train);
                let out = m.forward(&mut ctx, x)?;
                let terms = losses::total_loss(t, out.base.logits, out.align_logits, out.fused, &tg, &loss_cfg)?;
                Ok(terms.total)
            };
            (
                name,
                Case {
                    input,
                    f: Box::new(f),
                    probe: Some(probe),
                },
            )
        })
        .collect()
}

fn check(c: &Case, eps: f64) -> Result<f64> {
    grad_check_indices(&c.f, &c.input, eps, c.probe.as_deref())
}

/// Runs every primitive check over `seeds`; cases are independent and run
/// through `exec`.
pub fn run_primitives(seeds: &[u64], exec: Exec) -> Result<Vec<CheckResult>> {
    let cases = primitive_cases();
    let errs = exec::map_range(exec, cases.len(), |i| -> Result<f64> {
        let mut worst: f64 = 0.0;
        for &s in seeds {
            worst = worst.max(check(&(cases[i].1)(s), FD_EPS)?);
        }
        Ok(worst)
    });
    cases
        .iter()
        .zip(errs)
        .map(|((name, _), e)| {
            Ok(CheckResult {
                name,
                max_rel_error: e?,
                tolerance: PRIMITIVE_TOLERANCE,
                seeds: seeds.len(),
            })
        })
        .collect()
}

/// Full-model objective (with and without instance norm) over `seeds`.
pub fn run_model(seeds: &[u64], exec: Exec) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for (name, ibn) in [("model.total_loss", false), ("model.total_loss.ibn", true)] {
        let errs = exec::map_range(exec, seeds.len(), |i| -> Result<f64> {
            let mut worst: f64 = 0.0;
            for (_, c) in model_cases(seeds[i], ibn) {
                worst = worst.max(check(&c, MODEL_FD_EPS)?);
            }
            Ok(worst)
        });
        let mut worst: f64 = 0.0;
        for e in errs {
            worst = worst.max(e?);
        }
        out.push(CheckResult {
            name,
            max_rel_error: worst,
            tolerance: MODEL_TOLERANCE,
            seeds: seeds.len(),
        });
    }
    Ok(out)
}

/// Both suites.
pub fn run_all(seeds: &[u64], exec: Exec) -> Result<Vec<CheckResult>> {
    let mut v = run_primitives(seeds, exec)?;
    v.extend(run_model(seeds, exec)?);
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitives_pass_on_two_seeds() {
        for r in run_primitives(&[0, 1], Exec::Sequential).unwrap() {
            assert!(r.passed(), "{}: {}", r.name, r.max_rel_error);
        }
    }

    #[test]
    fn model_passes_on_one_seed() {
        for r in run_model(&[3], Exec::Sequential).unwrap() {
            assert!(r.passed(), "{}: {}", r.name, r.max_rel_error);
        }
    }
}
