//! Finite-difference checks for every differentiable op and the composite
//! modules built from them.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{rng, Check};
use crate::encoder::STRIDE;
use crate::gradcheck::{check, project, random};
use crate::model::{CrossAttn, DeformAttn, Model, ModelConfig, Probe};
use crate::nn::Builder;
use crate::params::{Init, ParamStore, ParamVars};
use crate::supervision::{cls_loss, frame_losses, reg_loss, FrameGt};
use crate::tensor::{Tape, Tensor, Var};
use crate::Result;

pub const OP_TOL: f64 = 1e-4;
pub const MODEL_TOL: f64 = 1e-3;
pub const INSTANCES: usize = 5;

type Closure = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;
type Case = fn(&mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Closure);

/// Values bounded away from zero, for ops with a kink there.
fn away_from_zero(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = r.gen_range(0.05..1.5);
        if r.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Sampling coordinates in `[-1, n]` that stay clear of cell boundaries.
fn coords(n: usize, h: usize, w: usize, r: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut pick = |hi: usize| loop {
        let v: f64 = r.gen_range(-1.0..hi as f64);
        if (v - v.round()).abs() > 0.02 {
            return v;
        }
    };
    let data: Vec<f64> = (0..n).flat_map(|_| [pick(w), pick(h)]).collect();
    Tensor::from_f64(vec![n, 2], &data).unwrap()
}

fn boxed(f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static) -> Closure {
    Box::new(f)
}

fn u(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
    random(shape, -1.0, 1.0, r)
}

fn op_cases() -> Vec<(&'static str, Case)> {
    vec![
        ("add_broadcast", |r| {
            (
                vec![u(&[2, 3, 4], r), u(&[3, 4], r)],
                boxed(|t, v| {
                    let y = t.add(v[0], v[1])?;
                    project(t, y, 1)
                }),
            )
        }),
        ("sub", |r| {
            (
                vec![u(&[3, 4], r), u(&[3, 4], r)],
                boxed(|t, v| {
                    let y = t.sub(v[0], v[1])?;
                    project(t, y, 2)
                }),
            )
        }),
        ("mul_broadcast", |r| {
            (
                vec![u(&[2, 3, 4], r), u(&[4], r)],
                boxed(|t, v| {
                    let y = t.mul(v[0], v[1])?;
                    project(t, y, 3)
                }),
            )
        }),
        ("scale", |r| {
            (
                vec![u(&[5], r)],
                boxed(|t, v| {
                    let y = t.scale(v[0], -1.7)?;
                    project(t, y, 4)
                }),
            )
        }),
        ("matmul", |r| {
            (
                vec![u(&[3, 4], r), u(&[4, 5], r)],
                boxed(|t, v| {
                    let y = t.matmul(v[0], v[1])?;
                    project(t, y, 5)
                }),
            )
        }),
        ("bmm", |r| {
            (
                vec![u(&[2, 3, 4], r), u(&[2, 4, 2], r)],
                boxed(|t, v| {
                    let y = t.bmm(v[0], v[1])?;
                    project(t, y, 6)
                }),
            )
        }),
        ("relu", |r| {
            (
                vec![away_from_zero(&[3, 4], r)],
                boxed(|t, v| {
                    let y = t.relu(v[0])?;
                    project(t, y, 7)
                }),
            )
        }),
        ("gelu", |r| {
            (
                vec![random(&[3, 4], -3.0, 3.0, r)],
                boxed(|t, v| {
                    let y = t.gelu(v[0])?;
                    project(t, y, 8)
                }),
            )
        }),
        ("sigmoid", |r| {
            (
                vec![random(&[3, 4], -4.0, 4.0, r)],
                boxed(|t, v| {
                    let y = t.sigmoid(v[0])?;
                    project(t, y, 9)
                }),
            )
        }),
        ("layer_norm", |r| {
            (
                vec![u(&[3, 6], r)],
                boxed(|t, v| {
                    let y = t.layer_norm(v[0])?;
                    project(t, y, 10)
                }),
            )
        }),
        ("l2_normalize", |r| {
            (
                vec![u(&[3, 5], r)],
                boxed(|t, v| {
                    let y = t.l2_normalize(v[0])?;
                    project(t, y, 11)
                }),
            )
        }),
        ("concat_axis0", |r| {
            (
                vec![u(&[2, 3], r), u(&[1, 3], r)],
                boxed(|t, v| {
                    let y = t.concat(&[v[0], v[1]], 0)?;
                    project(t, y, 12)
                }),
            )
        }),
        ("concat_axis1", |r| {
            (
                vec![u(&[2, 3, 2], r), u(&[2, 1, 2], r)],
                boxed(|t, v| {
                    let y = t.concat(&[v[0], v[1], v[0]], 1)?;
                    project(t, y, 13)
                }),
            )
        }),
        ("reshape", |r| {
            (
                vec![u(&[2, 6], r)],
                boxed(|t, v| {
                    let y = t.reshape(v[0], &[3, 4])?;
                    project(t, y, 14)
                }),
            )
        }),
        ("transpose", |r| {
            (
                vec![u(&[2, 3, 4], r)],
                boxed(|t, v| {
                    let y = t.transpose(v[0])?;
                    project(t, y, 15)
                }),
            )
        }),
        ("softmax_axis0", |r| {
            (
                vec![random(&[3, 4], -2.0, 2.0, r)],
                boxed(|t, v| {
                    let y = t.softmax(v[0], 0)?;
                    project(t, y, 16)
                }),
            )
        }),
        ("softmax_last", |r| {
            (
                vec![random(&[2, 3, 4], -2.0, 2.0, r)],
                boxed(|t, v| {
                    let y = t.softmax(v[0], 2)?;
                    project(t, y, 17)
                }),
            )
        }),
        ("bilinear_featmap_coords", |r| {
            (
                vec![u(&[3, 4, 5], r), coords(6, 4, 5, r)],
                boxed(|t, v| {
                    let y = t.bilinear_sample(v[0], v[1])?;
                    project(t, y, 18)
                }),
            )
        }),
        ("conv2d_stride1", |r| {
            (
                vec![u(&[2, 5, 6], r), u(&[3, 2, 3, 3], r), u(&[3], r)],
                boxed(|t, v| {
                    let y = t.conv2d(v[0], v[1], v[2], 1, 1)?;
                    project(t, y, 19)
                }),
            )
        }),
        ("conv2d_stride2", |r| {
            (
                vec![u(&[2, 6, 6], r), u(&[2, 2, 3, 3], r), u(&[2], r)],
                boxed(|t, v| {
                    let y = t.conv2d(v[0], v[1], v[2], 2, 1)?;
                    project(t, y, 20)
                }),
            )
        }),
        ("gather_rows", |r| {
            (
                vec![u(&[4, 3], r)],
                boxed(|t, v| {
                    let y = t.gather_rows(v[0], &[2, 0, 2, 3])?;
                    project(t, y, 21)
                }),
            )
        }),
        ("slice_last", |r| {
            (
                vec![u(&[3, 5], r)],
                boxed(|t, v| {
                    let y = t.slice_last(v[0], 1, 3)?;
                    project(t, y, 22)
                }),
            )
        }),
        ("clamp_last", |r| {
            (
                vec![away_from_zero(&[4, 2], r)],
                boxed(|t, v| {
                    let y = t.clamp_last(v[0], &[0.0, -0.0], &[1.0, 10.0])?;
                    project(t, y, 23)
                }),
            )
        }),
        ("sum_mean", |r| {
            (
                vec![u(&[3, 4], r)],
                boxed(|t, v| {
                    let a = t.sum(v[0])?;
                    let b = t.mean(v[0])?;
                    let b = t.mul(b, b)?;
                    Ok(t.add(a, b)?)
                }),
            )
        }),
        ("linear_rank3", |r| {
            (
                vec![u(&[2, 3, 4], r), u(&[4, 5], r), u(&[5], r)],
                boxed(|t, v| {
                    let y = t.linear(v[0], v[1], v[2])?;
                    project(t, y, 24)
                }),
            )
        }),
        ("cross_entropy", |r| {
            let targets: Vec<usize> = (0..4).map(|_| r.gen_range(0..5)).collect();
            let mask = vec![true, false, true, true];
            (vec![random(&[4, 5], -2.0, 2.0, r)], boxed(move |t, v| Ok(t.cross_entropy(v[0], &targets, &mask)?)))
        }),
        ("bce_with_logits", |r| {
            let targets: Vec<f64> = (0..5).map(|_| if r.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
            let mask = vec![true, true, false, true, true];
            (vec![random(&[5], -3.0, 3.0, r)], boxed(move |t, v| Ok(t.bce_with_logits(v[0], &targets, &mask)?)))
        }),
        ("l1_loss", |r| {
            let pred = u(&[3, 2], r);
            let target: Vec<f64> = pred.data().iter().map(|&p| p + if r.gen_bool(0.5) { 0.3 } else { -0.3 }).collect();
            let target: Vec<f64> = target.iter().map(|x| x + r.gen_range(-0.2..0.2)).collect();
            (vec![pred], boxed(move |t, v| Ok(t.l1_loss(v[0], &target, &[true, false, true])?)))
        }),
    ]
}

/// Parameter store whose every entry is drawn at random (zero-initialized
/// offset and residual weights included) so no sample sits on a grid line.
fn randomized<F>(build: F, r: &mut ChaCha8Rng) -> (ParamStore<f64>, Vec<Tensor<f64>>)
where
    F: FnOnce(&mut Builder<f64>),
{
    let mut store = ParamStore::default();
    let mut init = Init::new(r.gen());
    build(&mut Builder { store: &mut store, init: &mut init });
    let tensors: Vec<Tensor<f64>> = store.tensors().iter().map(|t| random(t.shape(), -0.5, 0.5, r)).collect();
    (store, tensors)
}

fn module_cases() -> Vec<(&'static str, Case)> {
    vec![
        ("deformable_attention", |r| {
            let (d, n, pts, h, w) = (4, 2, 3, 4, 5);
            let mut net = None;
            let (_, params) = randomized(|b| net = Some(DeformAttn::new(b, "da", d, pts)), r);
            let net = net.unwrap();
            let np = params.len();
            let base = coords(n * pts, h, w, r).reshaped(vec![n, 2 * pts]).unwrap();
            let mut inputs = params;
            inputs.extend([u(&[n, d], r), u(&[d, h, w], r), base, u(&[n, pts], r)]);
            (
                inputs,
                boxed(move |t, v| {
                    let pv = ParamVars::from_vars(v[..np].to_vec());
                    let out = net.forward(t, &pv, v[np], v[np + 1], v[np + 2], Some(v[np + 3]))?;
                    project(t, out.out, 30)
                }),
            )
        }),
        ("cross_attention", |r| {
            let (d, n, slots) = (4, 3, 3);
            let mut net = None;
            let (_, params) = randomized(|b| net = Some(CrossAttn::new(b, "ca", d, 2 * d)), r);
            let net = net.unwrap();
            let np = params.len();
            let mut inputs = params;
            inputs.push(u(&[n, d], r));
            inputs.extend((0..slots).map(|_| u(&[n, d], r)));
            (
                inputs,
                boxed(move |t, v| {
                    let pv = ParamVars::from_vars(v[..np].to_vec());
                    let (full, _) = net.forward(t, &pv, v[np], &v[np + 1..])?;
                    let (empty, _) = net.forward(t, &pv, v[np], &[])?;
                    let a = project(t, full, 31)?;
                    let b = project(t, empty, 32)?;
                    Ok(t.add(a, b)?)
                }),
            )
        }),
        ("cls_and_reg_losses", |r| {
            let grid = (3, 4);
            let gt = FrameGt {
                points: (0..2).map(|_| [r.gen_range(0.0..16.0), r.gen_range(0.0..12.0)]).collect(),
                visible: vec![true, r.gen_bool(0.5)],
            };
            let r_last = vec![[1.0, 2.0], [3.0, 0.0]];
            (
                vec![u(&[2, 12], r), u(&[2, 12], r), random(&[2, 2], -3.0, 3.0, r)],
                boxed(move |t, v| {
                    let c = cls_loss(t, &v[..2], &gt, grid)?;
                    let g = reg_loss(t, v[2], &r_last, &gt)?;
                    Ok(t.add(c, g)?)
                }),
            )
        }),
    ]
}

/// Runs `case` on fresh random instances and folds the reports into one check.
fn run_case(name: &str, case: Case, instances: usize, limit: Option<usize>, tol: f64, r: &mut ChaCha8Rng) -> Check {
    let mut worst = 0.0f64;
    let mut detail = String::new();
    for i in 0..instances {
        let (inputs, f) = case(r);
        match check(&inputs, limit, i as u64, |t, v| f(t, v)) {
            Ok(rep) => {
                if rep.max_rel_gated >= worst {
                    worst = rep.max_rel_gated;
                    detail = describe(&rep);
                }
            }
            Err(e) => return Check::new("gradient", name, false, format!("instance {i}: {e}")),
        }
    }
    Check::new("gradient", name, worst < tol, detail)
}

fn describe(rep: &crate::gradcheck::GradReport) -> String {
    format!(
        "rel {:.1e} (gated {:.1e}) abs {:.1e} over {} entries",
        rep.max_rel, rep.max_rel_gated, rep.max_abs, rep.checked
    )
}

pub fn micro_config() -> ModelConfig {
    ModelConfig {
        d: 8,
        enc_channels: 2,
        layers: 3,
        mem_len: 2,
        collision_points: 9,
        update_offsets: 2,
        head_points: 3,
        mlp_ratio: 1,
        ..Default::default()
    }
}

/// Whole tracker on three 16×16 frames (query frame plus two tracked
/// frames, so the second step reads memory) with reference indices frozen
/// to those chosen by an unperturbed forward pass.
pub fn micro_model_check(seed: u64, limit: usize) -> Result<crate::gradcheck::GradReport> {
    let mut r = rng(seed);
    let cfg = micro_config();
    let mut model = Model::<f64>::new(&cfg, r.gen())?;
    for t in model.params.tensors_mut() {
        *t = random(t.shape(), -0.4, 0.4, &mut r);
    }
    let (h, w) = (16, 16);
    let frames: Vec<Tensor<f64>> = (0..3).map(|_| random(&[3, h, w], 0.0, 1.0, &mut r)).collect();
    let queries = vec![[3.3, 5.1], [10.6, 12.2]];
    let gts: Vec<FrameGt> = (0..2)
        .map(|_| FrameGt {
            points: (0..2).map(|_| [r.gen_range(0.0..w as f64), r.gen_range(0.0..h as f64)]).collect(),
            visible: vec![true, r.gen_bool(0.5)],
        })
        .collect();
    let grid = (h / STRIDE, w / STRIDE);
    let np = model.params.len();

    let run = |t: &mut Tape<f64>,
               v: &[Var],
               forced: Option<&Vec<Vec<Vec<Vec<usize>>>>>|
     -> Result<(Var, Vec<Vec<Vec<Vec<usize>>>>)> {
        let pv = ParamVars::from_vars(v[..np].to_vec());
        let mut maps = Vec::new();
        for (i, &img) in v[np..].iter().enumerate() {
            maps.push(model.net.encoder.encode(t, &pv, img, i)?);
        }
        let mut state = crate::model::init_queries(t, &maps[0], &queries, cfg.mem_len)?;
        let mut total: Option<Var> = None;
        let mut chosen = Vec::new();
        for (k, fm) in maps[1..].iter().enumerate() {
            let mut probe = Probe { forced_refs: forced.map(|f| f[k].clone()), ..Default::default() };
            let out = crate::model::step(&model.net, t, &pv, &mut state, fm, &mut probe)?;
            chosen.push(out.layers.iter().map(|l| l.refs.indices.clone()).collect());
            let l = frame_losses(t, &out, &gts[k], grid, 1.0)?.total;
            total = Some(match total {
                Some(a) => t.add(a, l)?,
                None => l,
            });
        }
        Ok((total.expect("two tracked frames"), chosen))
    };

    let mut inputs = model.params.tensors().to_vec();
    inputs.extend(frames);
    let mut tape = Tape::new();
    let vars = inputs.iter().map(|x| tape.constant(x.clone())).collect::<Result<Vec<_>, _>>()?;
    let (_, refs) = run(&mut tape, &vars, None)?;
    check(&inputs, Some(limit), seed, |t, v| run(t, v, Some(&refs)).map(|(l, _)| l))
}

/// Every op and module check plus the end-to-end micro-model check.
pub fn suite(seed: u64) -> Vec<Check> {
    let mut r = rng(seed);
    let mut out: Vec<Check> =
        op_cases().into_iter().map(|(name, case)| run_case(name, case, INSTANCES, None, OP_TOL, &mut r)).collect();
    out.extend(
        module_cases().into_iter().map(|(name, case)| run_case(name, case, INSTANCES, Some(60), OP_TOL, &mut r)),
    );
    out.push(match micro_model_check(seed, 4) {
        Ok(rep) => Check::new("gradient", "end_to_end_micro_model", rep.passes(MODEL_TOL), describe(&rep)),
        Err(e) => Check::new("gradient", "end_to_end_micro_model", false, e.to_string()),
    });
    out
}
