//! Named finite-difference suites over every differentiable primitive and
//! the composite blocks of the network, all in double precision.
//!
//! Primitive suites perturb tape inputs directly. Block suites build the
//! module in a parameter store and perturb both its trainable parameters
//! and its inputs. Deep blocks contain ReLUs whose kinks a central stencil
//! can straddle; an element is treated as straddling when its step-`h` and
//! step-`h/2` estimates disagree, and it is then counted as skipped.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{Amf, ChannelAttention, FusionOrder, FusionVariant, SpatialAttention};
use crate::decoder::{Aspp, AsppConfig, DecoderBranch, TaskKind, UpsampleBlock};
use crate::encoder::{BackboneConfig, FusedPyramid, SCALES};
use crate::error::{Error, Result};
use crate::losses::{pyramid_loss, semantic_loss, ClassWeights, IGNORE_INDEX};
use crate::model::{Adsd, ModelConfig};
use crate::nn::{Mode, NormSettings, ParamBuilder, ParamStore, Session};
use crate::tensor::gradcheck::{gradcheck, projection, relative_error, GradcheckOptions, GradcheckReport, Mismatch};
use crate::tensor::{ConvSpec, NormStats, Tape, Tensor, Var};

/// Seeded instances run by every suite.
pub const INSTANCES: u64 = 5;

const SUITES: &[&str] = &[
    "conv2d",
    "conv_transpose2d",
    "batch_norm",
    "relu",
    "sigmoid",
    "arithmetic",
    "mul_channelwise",
    "mul_pixelwise",
    "global_avg_pool",
    "broadcast_spatial",
    "concat_channels",
    "softmax_cross_entropy",
    "berhu",
    "channel_attention",
    "spatial_attention",
    "amf",
    "upsample_block",
    "aspp",
    "decoder",
    "adsd",
];

pub fn suite_names() -> &'static [&'static str] {
    SUITES
}

#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub suite: &'static str,
    pub reports: Vec<GradcheckReport>,
    pub seconds: f64,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        !self.reports.is_empty() && self.reports.iter().all(GradcheckReport::passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
    }
}

/// Runs one suite by name, or every suite for `"all"`.
pub fn run_suite(name: &str) -> Result<Vec<SuiteResult>> {
    let names: Vec<&'static str> = if name == "all" {
        SUITES.to_vec()
    } else {
        let found = SUITES.iter().find(|&&s| s == name).ok_or_else(|| {
            Error::Usage(format!("unknown gradcheck suite `{name}`; expected `all` or one of {}", SUITES.join(", ")))
        })?;
        vec![*found]
    };
    names
        .into_iter()
        .map(|suite| {
            let start = Instant::now();
            let reports = run_one(suite)?;
            Ok(SuiteResult {
                suite,
                reports,
                seconds: start.elapsed().as_secs_f64(),
            })
        })
        .collect()
}

/// `suite,instance,checked,skipped,max_rel_err,tolerance,status` rows.
pub fn results_csv(results: &[SuiteResult]) -> String {
    let mut out = String::from("suite,instance,checked,skipped,max_rel_err,tolerance,status\n");
    for r in results {
        for rep in &r.reports {
            out.push_str(&format!(
                "{},{},{},{},{:e},{:e},{}\n",
                r.suite,
                rep.name,
                rep.checked,
                rep.skipped,
                rep.max_rel_err,
                rep.tolerance,
                if rep.passed() { "pass" } else { "FAIL" }
            ));
        }
    }
    out
}

fn opts() -> GradcheckOptions {
    GradcheckOptions::default()
}

fn rng_for(suite: &str, instance: u64) -> ChaCha8Rng {
    let h = suite.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
    ChaCha8Rng::seed_from_u64(h ^ instance.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn instance_name(suite: &str, tag: &str, i: u64) -> String {
    if tag.is_empty() {
        format!("{suite}#{i}")
    } else {
        format!("{suite}/{tag}#{i}")
    }
}

fn run_one(suite: &'static str) -> Result<Vec<GradcheckReport>> {
    let mut reports = Vec::new();
    for i in 0..INSTANCES {
        let mut r = rng_for(suite, i);
        let name = |tag: &str| instance_name(suite, tag, i);
        let none = |_: usize, _: usize| false;
        match suite {
            "conv2d" => {
                let spec = ConvSpec::new(2, 3, 3)
                    .padding(1 + (i as usize % 2))
                    .stride(1 + i as usize % 2)
                    .dilation(1 + (i as usize / 2) % 2);
                let inputs = [
                    rand_tensor(&mut r, &[2, 2, 5, 6]),
                    rand_tensor(&mut r, &spec.weight_shape()),
                    rand_tensor(&mut r, &[3]),
                ];
                reports.push(gradcheck(&name(""), &inputs, &opts(), |t, v| t.conv2d(v[0], v[1], Some(v[2]), spec), none)?);
            }
            "conv_transpose2d" => {
                let spec = ConvSpec::new(2, 3, 2 + i as usize % 2).stride(2);
                let inputs = [
                    rand_tensor(&mut r, &[2, 2, 3, 4]),
                    rand_tensor(&mut r, &spec.transpose_weight_shape()),
                    rand_tensor(&mut r, &[3]),
                ];
                reports.push(gradcheck(
                    &name(""),
                    &inputs,
                    &opts(),
                    |t, v| t.conv_transpose2d(v[0], v[1], Some(v[2]), spec),
                    none,
                )?);
            }
            "batch_norm" => {
                let inputs = [rand_tensor(&mut r, &[3, 2, 2, 3]), rand_tensor(&mut r, &[2]), rand_tensor(&mut r, &[2])];
                reports.push(gradcheck(
                    &name("train"),
                    &inputs,
                    &opts(),
                    |t, v| Ok(t.batch_norm(v[0], v[1], v[2], NormStats::Batch, 1e-5)?.0),
                    none,
                )?);
                let mean = [r.random_range(-0.5..0.5), r.random_range(-0.5..0.5)];
                let var = [r.random_range(0.2..2.0), r.random_range(0.2..2.0)];
                reports.push(gradcheck(
                    &name("eval"),
                    &inputs,
                    &opts(),
                    |t, v| Ok(t.batch_norm(v[0], v[1], v[2], NormStats::Running { mean: &mean, var: &var }, 1e-5)?.0),
                    none,
                )?);
            }
            "relu" => {
                let x = rand_tensor(&mut r, &[2, 3, 3, 2]);
                let near_zero: Vec<bool> = x.data().iter().map(|v| v.abs() < 2.0 * opts().step).collect();
                reports.push(gradcheck(&name(""), &[x], &opts(), |t, v| t.relu(v[0]), |_, j| near_zero[j])?);
            }
            "sigmoid" => {
                let x = rand_tensor(&mut r, &[2, 3, 3, 2]);
                reports.push(gradcheck(
                    &name("chain3"),
                    &[x],
                    &opts(),
                    |t, v| {
                        let a = t.sigmoid(v[0])?;
                        let b = t.sigmoid(a)?;
                        t.sigmoid(b)
                    },
                    none,
                )?);
            }
            "arithmetic" => {
                let x = rand_tensor(&mut r, &[2, 3, 2, 2]);
                let y = rand_tensor(&mut r, &[2, 3, 2, 2]);
                let factor = r.random_range(-2.0..2.0);
                reports.push(gradcheck(
                    &name(""),
                    &[x, y],
                    &opts(),
                    |t, v| {
                        let a = t.add(v[0], v[1])?;
                        let b = t.sub(a, v[1])?;
                        let c = t.mul(b, v[1])?;
                        let d = t.scale(c, factor)?;
                        let e = t.add_all(&[d, v[0], c])?;
                        let s = t.sum(e)?;
                        t.mul(s, s)
                    },
                    none,
                )?);
            }
            "mul_channelwise" => {
                let inputs = [rand_tensor(&mut r, &[2, 3, 3, 2]), rand_tensor(&mut r, &[2, 3, 1, 1])];
                reports.push(gradcheck(&name(""), &inputs, &opts(), |t, v| t.mul_channelwise(v[0], v[1]), none)?);
            }
            "mul_pixelwise" => {
                let inputs = [rand_tensor(&mut r, &[2, 3, 3, 2]), rand_tensor(&mut r, &[2, 1, 3, 2])];
                reports.push(gradcheck(&name(""), &inputs, &opts(), |t, v| t.mul_pixelwise(v[0], v[1]), none)?);
            }
            "global_avg_pool" => {
                let x = rand_tensor(&mut r, &[2, 3, 3, 4]);
                reports.push(gradcheck(&name(""), &[x], &opts(), |t, v| t.global_avg_pool(v[0]), none)?);
            }
            "broadcast_spatial" => {
                let x = rand_tensor(&mut r, &[2, 3, 1, 1]);
                reports.push(gradcheck(&name(""), &[x], &opts(), |t, v| t.broadcast_spatial(v[0], 3, 2), none)?);
            }
            "concat_channels" => {
                let inputs = [
                    rand_tensor(&mut r, &[2, 1, 3, 2]),
                    rand_tensor(&mut r, &[2, 3, 3, 2]),
                    rand_tensor(&mut r, &[2, 2, 3, 2]),
                ];
                reports.push(gradcheck(&name(""), &inputs, &opts(), |t, v| t.concat_channels(&[v[0], v[1], v[2], v[0]]), none)?);
            }
            "softmax_cross_entropy" => {
                let x = rand_tensor(&mut r, &[2, 4, 2, 3]);
                let labels: Vec<i32> = (0..12)
                    .map(|_| if r.random_range(0..5) == 0 { IGNORE_INDEX } else { r.random_range(0..4) })
                    .collect();
                let weights: Vec<f64> = (0..4).map(|_| r.random_range(0.2..2.0)).collect();
                reports.push(gradcheck(
                    &name(""),
                    &[x],
                    &opts(),
                    |t, v| t.softmax_cross_entropy(v[0], &labels, &weights, IGNORE_INDEX),
                    none,
                )?);
            }
            "berhu" => {
                let pred = rand_tensor(&mut r, &[1, 1, 3, 4]);
                let target = rand_tensor(&mut r, &[12]).into_data();
                let valid: Vec<bool> = (0..12).map(|_| r.random_range(0..4) != 0).collect();
                let kinks = berhu_kinks(pred.data(), &target, &valid, opts().step);
                reports.push(gradcheck(
                    &name(""),
                    &[pred],
                    &opts(),
                    |t, v| Ok(t.berhu(v[0], &target, &valid)?.0),
                    |_, j| kinks.contains(&j),
                )?);
            }
            "channel_attention" => {
                let mut store = ParamStore::new();
                let ca = ChannelAttention::new(&mut ParamBuilder::new(&mut store, 11 + i), 8, 4)?;
                jitter_biases(&mut store, &mut r);
                let x = rand_tensor(&mut r, &[2, 8, 3, 3]);
                reports.push(check_module(&name(""), &store, &[x], Mode::Train, &opts(), |s, v| ca.forward(s, v[0]))?);
            }
            "spatial_attention" => {
                let mut store = ParamStore::new();
                let sa = SpatialAttention::new(&mut ParamBuilder::new(&mut store, 21 + i), 4)?;
                jitter_biases(&mut store, &mut r);
                let x = rand_tensor(&mut r, &[2, 4, 3, 3]);
                reports.push(check_module(&name(""), &store, &[x], Mode::Train, &opts(), |s, v| sa.forward(s, v[0]))?);
            }
            "amf" => {
                for (variant, order) in [
                    (FusionVariant::Summation, FusionOrder::PerModality),
                    (FusionVariant::ChannelAttention, FusionOrder::PerModality),
                    (FusionVariant::SpatialAttention, FusionOrder::PerModality),
                    (FusionVariant::ChannelAttention, FusionOrder::AfterSum),
                    (FusionVariant::SpatialAttention, FusionOrder::AfterSum),
                ] {
                    let mut store = ParamStore::new();
                    let amf = Amf::new(&mut ParamBuilder::new(&mut store, 31 + i), variant, order, 8, 4)?;
                    jitter_biases(&mut store, &mut r);
                    let inputs = [rand_tensor(&mut r, &[2, 8, 3, 3]), rand_tensor(&mut r, &[2, 8, 3, 3])];
                    let tag = format!("{}-{}", variant.as_str(), order.as_str());
                    reports.push(check_module(&name(&tag), &store, &inputs, Mode::Train, &opts(), |s, v| {
                        amf.forward(s, v[0], v[1])
                    })?);
                }
            }
            "upsample_block" => {
                let mut store = ParamStore::new();
                let block = UpsampleBlock::new(&mut ParamBuilder::new(&mut store, 41 + i), 3, 4)?;
                let x = rand_tensor(&mut r, &[2, 3, 3, 3]);
                let y = rand_tensor(&mut r, &[2, 4, 3, 3]);
                reports.push(check_module(&name(""), &store, &[x, y], Mode::Train, &opts(), |s, v| {
                    let p = block.project.forward(s, v[0])?;
                    let merged = s.tape.add(p, v[1])?;
                    block.up.forward(s, merged)
                })?);
            }
            "aspp" => {
                let cfg = AsppConfig {
                    rates: vec![1, 2],
                    branch_channels: 2,
                    one_by_one: true,
                    image_pooling: true,
                };
                let mut store = ParamStore::new();
                let aspp = Aspp::new(&mut ParamBuilder::new(&mut store, 51 + i), &cfg, 3, 4)?;
                jitter_biases(&mut store, &mut r);
                let x = rand_tensor(&mut r, &[2, 3, 5, 5]);
                reports.push(check_module(&name(""), &store, &[x], Mode::Train, &opts(), |s, v| aspp.forward(s, v[0]))?);
            }
            "decoder" => {
                let channels = [3, 4, 4, 4, 4];
                let cfg = tiny_aspp();
                let mut store = ParamStore::new();
                let mut b = ParamBuilder::new(&mut store, 61 + i);
                let branch = DecoderBranch::new(&mut b, &channels, 4, Some((0, &cfg)), 4, 3, "head", 3)?;
                jitter_biases(&mut store, &mut r);
                let (n, h) = (2, 32);
                let inputs: Vec<Tensor<f64>> = (0..SCALES)
                    .map(|l| {
                        let side = h >> (l + 1);
                        rand_tensor(&mut r, &[n, channels[l], side, side])
                    })
                    .collect();
                let labels = random_labels(&mut r, n * h * h, 3);
                let mut o = opts();
                o.max_elements_per_input = Some(6);
                reports.push(check_module(&name(""), &store, &inputs, Mode::Train, &o, |s, v| {
                    let out = branch.forward(s, &FusedPyramid { levels: v.to_vec() })?;
                    smooth_objective(&mut s.tape, out.head, &out.side_outputs, None, &labels, (h, h))
                })?);
            }
            "adsd" => {
                let config = tiny_adsd_config();
                let mut store = ParamStore::new();
                let model = Adsd::new(&config, &mut store, 71 + i)?;
                jitter_biases(&mut store, &mut r);
                let (n, h) = (2, 32);
                let rgb = rand_tensor(&mut r, &[n, 3, h, h]);
                let depth = rand_tensor(&mut r, &[n, 1, h, h]);
                let labels = random_labels(&mut r, n * h * h, config.num_classes);
                let mut o = opts();
                o.max_elements_per_input = Some(6);
                reports.push(check_module(&name(""), &store, &[rgb, depth], Mode::Train, &o, |s, v| {
                    let out = model.forward(s, v[0], v[1], true)?;
                    let secondary = out.secondary.as_ref().map(|b| b.head);
                    smooth_objective(&mut s.tape, out.primary.head, &out.primary.side_outputs, secondary, &labels, (h, h))
                })?);
            }
            other => unreachable!("suite `{other}` is listed but not implemented"),
        }
    }
    Ok(reports)
}

fn tiny_aspp() -> AsppConfig {
    AsppConfig {
        rates: vec![1, 2],
        branch_channels: 2,
        one_by_one: true,
        image_pooling: true,
    }
}

/// The smallest network that still exercises every component: both
/// streams, attention fusion at all scales, ASPP, four side outputs and a
/// secondary branch.
pub fn tiny_adsd_config() -> ModelConfig {
    ModelConfig {
        num_classes: 3,
        backbone: BackboneConfig {
            stage_channels: [4, 8, 8, 8, 8],
            blocks_per_stage: [1, 1, 1, 1, 1],
            expansion: 2,
        },
        decoder_width: 4,
        aspp: Some(tiny_aspp()),
        secondary: Some(TaskKind::Normal),
        ..ModelConfig::default()
    }
}

/// Cross-entropy on the head and side maps plus a fixed projection of the
/// secondary head. berHu is left out on purpose: its threshold is a
/// detached maximum, which central differences see as a moving kink.
fn smooth_objective(
    tape: &mut Tape<f64>,
    head: Var,
    sides: &[Var],
    secondary: Option<Var>,
    labels: &[i32],
    hw: (usize, usize),
) -> Result<Var> {
    let weights = ClassWeights::uniform(tape.value(head).shape()[1]);
    let mut terms = vec![semantic_loss(tape, head, labels, &weights)?];
    terms.extend(pyramid_loss(tape, sides, labels, hw, &weights)?);
    if let Some(sec) = secondary {
        let w = projection(tape.value(sec).len());
        let dot = tape.dot_const(sec, &w)?;
        terms.push(tape.scale(dot, 1e-2)?);
    }
    tape.add_all(&terms)
}

fn random_labels(r: &mut ChaCha8Rng, len: usize, classes: usize) -> Vec<i32> {
    (0..len)
        .map(|_| if r.random_range(0..10) == 0 { IGNORE_INDEX } else { r.random_range(0..classes as i32) })
        .collect()
}

/// Biases start at zero, which would leave every bias gradient check at
/// the same trivial point; small random offsets make instances differ.
fn jitter_biases(store: &mut ParamStore<f64>, r: &mut ChaCha8Rng) {
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, p)| p.kind.trainable() && p.name.ends_with("bias"))
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v = r.random_range(-0.1..0.1);
        }
    }
}

fn berhu_kinks(pred: &[f64], target: &[f64], valid: &[bool], step: f64) -> Vec<usize> {
    let res: Vec<f64> = pred.iter().zip(target).map(|(p, t)| (p - t).abs()).collect();
    let max = (0..res.len()).filter(|&i| valid[i]).map(|i| res[i]).fold(0.0, f64::max);
    let beta = max / 5.0;
    (0..res.len())
        .filter(|&i| valid[i] && ((res[i] - beta).abs() <= 2.0 * step || max - res[i] <= 2.0 * step || res[i] <= 2.0 * step))
        .collect()
}

enum Target {
    Param(crate::nn::ParamId),
    Input(usize),
}

/// Gradient check of a module forward pass with respect to its trainable
/// parameters and its inputs. Non-scalar outputs are reduced with the same
/// fixed projection as [`gradcheck`].
pub fn check_module<F>(
    name: &str,
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    mode: Mode,
    opts: &GradcheckOptions,
    forward: F,
) -> Result<GradcheckReport>
where
    F: Fn(&mut Session<'_, f64>, &[Var]) -> Result<Var>,
{
    let run = |store: &ParamStore<f64>, inputs: &[Tensor<f64>], track: bool| -> Result<(f64, Option<_>)> {
        let mut work = store.clone();
        let mut s = Session::new(&mut work, mode, NormSettings::default());
        let vars: Vec<Var> = inputs.iter().map(|t| s.tape.leaf(t.clone(), track)).collect();
        let out = forward(&mut s, &vars)?;
        let loss = if s.value(out).len() == 1 {
            out
        } else {
            let w = projection(s.value(out).len());
            s.tape.dot_const(out, &w)?
        };
        let value = s.value(loss).item();
        let grads = if track { Some(s.backward_with(loss, &vars)?) } else { None };
        Ok((value, grads))
    };
    let (_, grads) = run(store, inputs, true)?;
    let (param_grads, input_grads) = grads.expect("tracked run");

    let mut targets: Vec<(Target, Tensor<f64>)> = store
        .iter()
        .filter(|(_, p)| p.kind.trainable())
        .map(|(id, p)| {
            let g = param_grads.get(id).cloned().unwrap_or_else(|| Tensor::zeros(p.value.shape().to_vec()));
            (Target::Param(id), g)
        })
        .collect();
    for (i, g) in input_grads.into_iter().enumerate() {
        targets.push((Target::Input(i), g.unwrap_or_else(|| Tensor::zeros(inputs[i].shape().to_vec()))));
    }

    let mut report = GradcheckReport {
        name: name.to_string(),
        checked: 0,
        skipped: 0,
        max_rel_err: 0.0,
        worst: None,
        tolerance: opts.tolerance,
    };
    let mut sampler = ChaCha8Rng::seed_from_u64(0x9a7d);
    let mut work_store = store.clone();
    let mut work_inputs = inputs.to_vec();
    for (t, (target, analytic)) in targets.iter().enumerate() {
        let len = analytic.len();
        let elements: Vec<usize> = match opts.max_elements_per_input {
            Some(cap) if cap < len => (0..cap).map(|_| sampler.random_range(0..len)).collect(),
            _ => (0..len).collect(),
        };
        for j in elements {
            let mut central = |h: f64| -> Result<f64> {
                let mut eval_at = |delta: f64| -> Result<f64> {
                    let slot = match target {
                        Target::Param(id) => &mut work_store.value_mut(*id).data_mut()[j],
                        Target::Input(i) => &mut work_inputs[*i].data_mut()[j],
                    };
                    let x0 = *slot;
                    *slot = x0 + delta;
                    let value = run(&work_store, &work_inputs, false).map(|r| r.0);
                    let slot = match target {
                        Target::Param(id) => &mut work_store.value_mut(*id).data_mut()[j],
                        Target::Input(i) => &mut work_inputs[*i].data_mut()[j],
                    };
                    *slot = x0;
                    value
                };
                Ok((eval_at(h)? - eval_at(-h)?) / (2.0 * h))
            };
            let a = analytic.data()[j];
            let numeric = central(opts.step)?;
            let err = relative_error(a, numeric, opts.floor);
            if err >= opts.tolerance {
                let half = central(opts.step / 2.0)?;
                if relative_error(numeric, half, opts.floor) >= opts.tolerance / 10.0 {
                    report.skipped += 1;
                    continue;
                }
            }
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some(Mismatch {
                    input: t,
                    element: j,
                    analytic: a,
                    numeric,
                    rel_err: err,
                });
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_suite_is_a_usage_error() {
        assert!(matches!(run_suite("nope"), Err(Error::Usage(_))));
    }

    #[test]
    fn every_suite_name_is_unique() {
        let mut names = SUITES.to_vec();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), SUITES.len());
    }

    #[test]
    fn cheap_suites_pass() {
        for suite in ["conv2d", "relu", "channel_attention"] {
            let res = run_suite(suite).unwrap();
            assert_eq!(res[0].reports.len(), INSTANCES as usize);
            assert!(res[0].passed(), "{:?}", res[0]);
        }
    }
}
