//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! fails. `MMT_ACCEPTANCE_ONLY=1,4,8` restricts the run to a subset.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mmt::attention::{attention, global_mha, mw_mha, MhaParams, RelPosBias};
use mmt::blocks::{DecoderPair, EncoderPair};
use mmt::checkpoint::{load_model, model_checkpoint, Checkpoint};
use mmt::data::{encode_volume, generate_phantom, mean_normalize, slices, MultiContrastVolume, PhantomConfig};
use mmt::diffcore::gradcheck::{all_coords, check, check_params, rel_err_scaled};
use mmt::diffcore::{flops, Graph, ParamStore, Tensor, Var, LAYERNORM_EPS};
use mmt::eval::interp::{contribution_percentages, contribution_percentages_where, token_overlaps, PixelBox};
use mmt::eval::metrics::psnr_ref;
use mmt::eval::report::{evaluate, ScenarioSet};
use mmt::geometry::{
    expand_tokens, merge_tokens, patch_partition, patch_unpartition, window_partition, window_reverse, WindowSpec,
};
use mmt::losses::{
    discriminator_loss, generator_adv_loss, generator_loss, reconstruction_loss, synthesis_loss, Labels, LossWeights,
};
use mmt::model::{ContrastScenario, Mmt, MmtConfig};
use mmt::nn::Init;
use mmt::training::{select_contrasts, TrainConfig, Trainer};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn ok<T>(r: mmt::Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn images(rng: &mut ChaCha8Rng, m: usize, h: usize, w: usize) -> Tensor {
    Tensor::new(vec![m, 1, h, w], (0..m * h * w).map(|_| rng.random_range(0.1..2.0)).collect()).unwrap()
}

/// Scalar with a distinct upstream gradient per entry of `v`.
fn weighted(g: &mut Graph<'_>, v: Var, seed: u64) -> mmt::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = g.constant(rand_t(&mut rng, g.shape(v)));
    let p = g.mul(v, w)?;
    Ok(g.sum(p))
}

const SEEDS: u64 = 20;
const GRAD_TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;

// ---------------------------------------------------------------------
// 1. gradients

type Primitive = (&'static str, Vec<Vec<usize>>, fn(&mut Graph<'_>, &[Var]) -> mmt::Result<Var>);

fn primitives() -> Vec<Primitive> {
    vec![
        ("add", vec![vec![2, 3, 4], vec![3, 1]], |g, v| g.add(v[0], v[1])),
        ("sub", vec![vec![3, 4], vec![4]], |g, v| g.sub(v[0], v[1])),
        ("mul", vec![vec![2, 1, 3], vec![4, 1]], |g, v| g.mul(v[0], v[1])),
        ("scale", vec![vec![5]], |g, v| Ok(g.scale(v[0], -1.7))),
        ("gelu", vec![vec![9]], |g, v| Ok(g.gelu(v[0]))),
        ("relu", vec![vec![9]], |g, v| Ok(g.relu(v[0]))),
        ("leaky_relu", vec![vec![9]], |g, v| Ok(g.leaky_relu(v[0], 0.2))),
        ("matmul", vec![vec![2, 3, 4], vec![4, 5]], |g, v| g.matmul(v[0], v[1])),
        ("matmul_batched", vec![vec![2, 1, 3, 4], vec![3, 4, 2]], |g, v| g.matmul(v[0], v[1])),
        ("reshape", vec![vec![2, 6]], |g, v| g.reshape(v[0], &[3, 4])),
        ("permute", vec![vec![2, 3, 4]], |g, v| g.permute(v[0], &[2, 0, 1])),
        ("transpose", vec![vec![2, 3, 4]], |g, v| g.transpose(v[0])),
        ("concat", vec![vec![2, 3], vec![2, 2]], |g, v| g.concat(&[v[0], v[1]], 1)),
        ("narrow", vec![vec![3, 5]], |g, v| g.narrow(v[0], 1, 1, 3)),
        ("split", vec![vec![5, 2]], |g, v| {
            let p = g.split(v[0], 0, &[2, 3])?;
            let a = g.scale(p[0], 2.0);
            g.concat(&[p[1], a], 0)
        }),
        ("gather", vec![vec![6]], |g, v| g.gather(v[0], Arc::from(vec![5, 0, 0, 3]), &[2, 2])),
        ("gather_rows", vec![vec![4, 3]], |g, v| g.gather_rows(v[0], Arc::from(vec![3, 1, 1]))),
        ("scatter_add", vec![vec![4]], |g, v| g.scatter_add(v[0], Arc::from(vec![2, 0, 2, 1]), &[3])),
        ("softmax", vec![vec![3, 4, 5]], |g, v| g.softmax(v[0], 1)),
        ("layernorm", vec![vec![4, 6], vec![6], vec![6]], |g, v| g.layernorm(v[0], v[1], v[2], LAYERNORM_EPS)),
        ("conv2d", vec![vec![2, 2, 5, 4], vec![3, 2, 3, 3], vec![3]], |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 1)),
        ("conv2d_stride2", vec![vec![1, 2, 8, 8], vec![2, 2, 4, 4], vec![2]], |g, v| {
            g.conv2d(v[0], v[1], Some(v[2]), 2, 1)
        }),
        ("sum", vec![vec![3, 3]], |g, v| Ok(g.sum(v[0]))),
        ("mean", vec![vec![3, 3]], |g, v| Ok(g.mean(v[0]))),
        ("l1_loss", vec![vec![3, 4], vec![3, 4]], |g, v| g.l1_loss(v[0], v[1])),
        ("mse_loss", vec![vec![3, 4], vec![3, 4]], |g, v| g.mse_loss(v[0], v[1])),
        ("attention", vec![vec![2, 5, 4], vec![2, 6, 4], vec![2, 6, 3], vec![5, 6]], |g, v| {
            Ok(attention(g, v[0], v[1], v[2], Some(v[3]), None)?.0)
        }),
    ]
}

fn track(worst: &mut (f64, String), err: f64, what: impl FnOnce() -> String) {
    if err > worst.0 || worst.1.is_empty() {
        *worst = (err.max(worst.0), what());
    }
}

/// Manual central differences over sampled parameter entries and input
/// pixels of the full model. The model reads its own parameters, so the
/// closure-based helper cannot hold the store mutably.
fn model_gradcheck(seed: u64) -> Result<(f64, usize), String> {
    let cfg = MmtConfig {
        n_contrasts: 2,
        channels: 1,
        window: (2, 2),
        depth: 2,
    };
    let mut model = ok(Mmt::new(cfg, seed))?;
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
    let x = images(&mut rng, 1, 32, 32);
    let loss = |model: &Mmt, x: &Tensor| -> f64 {
        let mut g = Graph::no_grad();
        let xv = g.constant(x.clone());
        let outs = model.forward(&mut g, xv, &[0], &[1, 0]).unwrap();
        let a = weighted(&mut g, outs[0], seed).unwrap();
        let b = weighted(&mut g, outs[1], seed + 1).unwrap();
        let s = g.add(a, b).unwrap();
        g.value(s).item()
    };
    let (pgrads, xgrad) = {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let outs = ok(model.forward(&mut g, xv, &[0], &[1, 0]))?;
        let a = ok(weighted(&mut g, outs[0], seed))?;
        let b = ok(weighted(&mut g, outs[1], seed + 1))?;
        let s = ok(g.add(a, b))?;
        ok(g.backward(s))?;
        (g.param_grads(&model.params), g.grad(xv).cloned().unwrap())
    };
    let ids: Vec<_> = model.params.iter().map(|(id, _, t)| (id, t.numel())).collect();
    let coords: Vec<_> = ids.iter().map(|&(id, n)| (id, rng.random_range(0..n))).collect();
    let pixels: Vec<usize> = (0..16).map(|_| rng.random_range(0..x.numel())).collect();
    let analytic: Vec<f64> = coords
        .iter()
        .map(|&(id, j)| pgrads.get(id).map_or(0.0, |t| t.data()[j]))
        .chain(pixels.iter().map(|&j| xgrad.data()[j]))
        .collect();
    let scale = analytic.iter().fold(0.0f64, |m, a| m.max(a.abs()));

    // The image codecs use ReLU, so an interval can straddle a kink, and
    // the deep forward pass carries rounding noise that a small step
    // amplifies. Entries failing at the default step are measured again
    // at a ten times smaller and a ten times larger step; the best of
    // the three counts.
    let mut numeric = |k: usize, h: f64| -> f64 {
        let (up, down) = if k < coords.len() {
            let (id, j) = coords[k];
            let orig = model.params.get(id).data()[j];
            model.params.get_mut(id).data_mut()[j] = orig + h;
            let up = loss(&model, &x);
            model.params.get_mut(id).data_mut()[j] = orig - h;
            let down = loss(&model, &x);
            model.params.get_mut(id).data_mut()[j] = orig;
            (up, down)
        } else {
            let mut xs = x.clone();
            let j = pixels[k - coords.len()];
            xs.data_mut()[j] += h;
            let up = loss(&model, &xs);
            xs.data_mut()[j] -= 2.0 * h;
            (up, loss(&model, &xs))
        };
        (up - down) / (2.0 * h)
    };
    let (mut worst, mut retried) = (0.0f64, 0);
    for (k, &a) in analytic.iter().enumerate() {
        let mut err = rel_err_scaled(a, numeric(k, FD_STEP), scale);
        if err >= GRAD_TOL {
            retried += 1;
            for h in [FD_STEP / 10.0, FD_STEP * 10.0] {
                err = err.min(rel_err_scaled(a, numeric(k, h), scale));
            }
        }
        worst = worst.max(err);
    }
    Ok((worst, retried))
}

fn c1_gradients() -> Outcome {
    let start = Instant::now();
    let mut worst = (0.0, String::new());
    let (mut checks, mut retried) = (0usize, 0usize);
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, shapes, op) in primitives() {
            let ins: Vec<Tensor> = shapes.iter().map(|s| rand_t(&mut rng, s)).collect();
            let err = check(&ins, FD_STEP, |g, v| {
                let y = op(g, v)?;
                if g.value(y).numel() == 1 {
                    Ok(y)
                } else {
                    weighted(g, y, seed)
                }
            });
            checks += 1;
            track(&mut worst, err, || format!("{name} seed {seed}"));
        }

        let (dim, heads, h, w) = (8, 2, 4, 4);
        let spec = ok(WindowSpec::new(2, 2))?;
        let mut store = ParamStore::new();
        let (enc, dec) = {
            let mut init = Init::new(&mut store, &mut rng);
            (
                ok(EncoderPair::new(&mut init, "enc", dim, heads, spec))?,
                ok(DecoderPair::new(&mut init, "dec", dim, heads, spec))?,
            )
        };
        let x = rand_t(&mut rng, &[2, h * w, dim]);
        let y = rand_t(&mut rng, &[1, h * w, dim]);
        let f = rand_t(&mut rng, &[2, h * w, dim]);
        {
            let store = &store;
            let err = check(std::slice::from_ref(&x), FD_STEP, |g, v| {
                let z = enc.forward(g, store, v[0], h, w)?;
                weighted(g, z, seed)
            });
            track(&mut worst, err, || format!("encoder pair inputs seed {seed}"));
            let err = check(&[y.clone(), f.clone()], FD_STEP, |g, v| {
                let (z, _) = dec.forward(g, store, v[0], v[1], h, w, false)?;
                weighted(g, z, seed)
            });
            track(&mut worst, err, || format!("decoder pair inputs seed {seed}"));
        }
        let coords = all_coords(&store);
        let err = check_params(&mut store, &coords, FD_STEP, |g, ps| {
            let xv = g.constant(x.clone());
            let z = enc.forward(g, ps, xv, h, w)?;
            let a = weighted(g, z, seed)?;
            let yv = g.constant(y.clone());
            let fv = g.constant(f.clone());
            let (z, _) = dec.forward(g, ps, yv, fv, h, w, false)?;
            let b = weighted(g, z, seed + 1)?;
            g.add(a, b)
        });
        track(&mut worst, err, || format!("encoder/decoder pair params seed {seed}"));

        let (err, n) = model_gradcheck(seed)?;
        retried += n;
        track(&mut worst, err, || format!("full model seed {seed}"));
        checks += 4;
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(worst.0 < GRAD_TOL, || format!("worst rel. error {:.2e} at {}", worst.0, worst.1))?;
    ensure(secs < 300.0, || format!("took {secs:.0}s, budget 300s"))?;
    Ok(format!(
        "{checks} checks over {SEEDS} seeds, worst rel. error {:.2e} ({}); {retried} full-model entries re-measured at steps {:.0e} and {:.0e}",
        worst.0,
        worst.1,
        FD_STEP / 10.0,
        FD_STEP * 10.0
    ))
}

// ---------------------------------------------------------------------
// 2. geometry

/// Features `[m, h·w, 3]` that spell out each token's (contrast, row, col).
fn coordinate_tokens(m: usize, h: usize, w: usize) -> Tensor {
    let mut data = Vec::with_capacity(m * h * w * 3);
    for c in 0..m {
        for i in 0..h {
            for j in 0..w {
                data.extend([c as f64, i as f64, j as f64]);
            }
        }
    }
    Tensor::new(vec![m, h * w, 3], data).unwrap()
}

fn geometry_configs() -> Vec<(usize, usize, WindowSpec, usize)> {
    let grids = [(2, 2), (4, 4), (4, 8), (8, 4), (6, 6), (8, 8), (6, 4), (2, 6)];
    let windows = [(1, 1), (2, 2), (2, 1), (4, 4), (3, 3), (2, 4)];
    let mut v = Vec::new();
    for &(h, w) in &grids {
        for &(wh, ww) in &windows {
            if h % wh != 0 || w % ww != 0 {
                continue;
            }
            let base = WindowSpec::new(wh, ww).unwrap();
            let specs = if base.shifted().is_shifted() { vec![base, base.shifted()] } else { vec![base] };
            for spec in specs {
                for m in 1..=3 {
                    v.push((h, w, spec, m));
                }
            }
        }
    }
    v
}

/// Brute-force shifted-window attention for one layer: every query looks
/// at the tokens of its rolled window that did not wrap around a different
/// grid edge, scored with the relative offset inside the window.
#[allow(clippy::too_many_arguments)]
fn brute_window_attention(
    store: &ParamStore,
    mha: &MhaParams,
    bias: &RelPosBias,
    x: &Tensor,
    m: usize,
    h: usize,
    w: usize,
    spec: &WindowSpec,
) -> Vec<f64> {
    let d = mha.dim;
    let dk = mha.head_dim();
    let n = m * h * w;
    let project = |lin: &mmt::nn::Linear, src: &[f64]| -> Vec<f64> {
        let wt = store.get(lin.w).data();
        let b = lin.b.map(|b| store.get(b).data().to_vec()).unwrap_or(vec![0.0; lin.d_out]);
        let rows = src.len() / lin.d_in;
        let mut out = vec![0.0; rows * lin.d_out];
        for r in 0..rows {
            for o in 0..lin.d_out {
                let mut s = b[o];
                for i in 0..lin.d_in {
                    s += src[r * lin.d_in + i] * wt[i * lin.d_out + o];
                }
                out[r * lin.d_out + o] = s;
            }
        }
        out
    };
    let (q, k, v) = (project(&mha.wq, x.data()), project(&mha.wk, x.data()), project(&mha.wv, x.data()));
    let table = store.get(bias.table).data();
    let span_w = 2 * bias.ww - 1;
    // rolled coordinates of token t = (c, i, j)
    let rolled = |t: usize| {
        let (i, j) = ((t % (h * w)) / w, t % w);
        ((i + h - spec.shift_h) % h, (j + w - spec.shift_w) % w)
    };
    let mut merged = vec![0.0; n * d];
    for tq in 0..n {
        let (ri, rj) = rolled(tq);
        let keys: Vec<usize> = (0..n)
            .filter(|&tk| {
                let (si, sj) = rolled(tk);
                ri / spec.wh == si / spec.wh
                    && rj / spec.ww == sj / spec.ww
                    && (ri >= h - spec.shift_h) == (si >= h - spec.shift_h)
                    && (rj >= w - spec.shift_w) == (sj >= w - spec.shift_w)
            })
            .collect();
        for hd in 0..mha.heads {
            let scores: Vec<f64> = keys
                .iter()
                .map(|&tk| {
                    let (si, sj) = rolled(tk);
                    let dot: f64 = (0..dk).map(|e| q[tq * d + hd * dk + e] * k[tk * d + hd * dk + e]).sum();
                    let dr = ri % spec.wh + bias.wh - 1 - si % spec.wh;
                    let dc = rj % spec.ww + bias.ww - 1 - sj % spec.ww;
                    dot / (dk as f64).sqrt() + table[(dr * span_w + dc) * mha.heads + hd]
                })
                .collect();
            let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
            let z: f64 = e.iter().sum();
            for (p, &tk) in e.iter().zip(&keys) {
                for c in 0..dk {
                    merged[tq * d + hd * dk + c] += p / z * v[tk * d + hd * dk + c];
                }
            }
        }
    }
    project(&mha.wo, &merged)
}

fn c2_geometry() -> Outcome {
    let configs = geometry_configs();
    ensure(configs.len() >= 50, || format!("only {} configurations", configs.len()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for &(h, w, spec, m) in &configs {
        let tag = || format!("grid {h}x{w} window {}x{} shift ({}, {}) M={m}", spec.wh, spec.ww, spec.shift_h, spec.shift_w);
        let mut g = Graph::no_grad();

        // partition layout against the rolled grid
        let coords = g.constant(coordinate_tokens(m, h, w));
        let win = ok(window_partition(&mut g, coords, h, w, &spec))?;
        let data = g.value(win).data().to_vec();
        let (nww, area) = (w / spec.ww, spec.area());
        for (row, tok) in data.chunks_exact(3).enumerate() {
            let (wi, rest) = (row / (m * area), row % (m * area));
            let (c, p) = (rest / area, rest % area);
            let ri = (wi / nww) * spec.wh + p / spec.ww;
            let rj = (wi % nww) * spec.ww + p % spec.ww;
            let want = [c as f64, ((ri + spec.shift_h) % h) as f64, ((rj + spec.shift_w) % w) as f64];
            ensure(tok == want, || format!("{}: window row {row} holds {tok:?}, expected {want:?}", tag()))?;
        }

        // round trips on random features
        let t = rand_t(&mut rng, &[m, h * w, 4]);
        let x = g.constant(t.clone());
        let win = ok(window_partition(&mut g, x, h, w, &spec))?;
        let back = ok(window_reverse(&mut g, win, m, h, w, &spec))?;
        ensure(g.value(back) == &t, || format!("{}: window reverse is not exact", tag()))?;
        if h % 2 == 0 && w % 2 == 0 {
            let merged = ok(merge_tokens(&mut g, x, m, h, w, 4, 2))?;
            let md = g.value(merged).data().to_vec();
            for (row, chunk) in md.chunks_exact(16).enumerate() {
                let (c, pos) = (row / ((h / 2) * (w / 2)), row % ((h / 2) * (w / 2)));
                let (i, j) = (pos / (w / 2), pos % (w / 2));
                for (q, part) in chunk.chunks_exact(4).enumerate() {
                    let src = (c * h + 2 * i + q / 2) * w + 2 * j + q % 2;
                    ensure(part == &t.data()[src * 4..src * 4 + 4], || {
                        format!("{}: merged token {row} chunk {q} is not neighbour {src}", tag())
                    })?;
                }
            }
            let expanded = ok(expand_tokens(&mut g, merged, h / 2, w / 2, 2))?;
            ensure(g.value(expanded) == &t, || format!("{}: expand after merge is not exact", tag()))?;
        }
        let img = images(&mut rng, m, 4 * h, 4 * w);
        let iv = g.constant(img.clone());
        let tokens = ok(patch_partition(&mut g, iv))?;
        let back = ok(patch_unpartition(&mut g, tokens, 1, 4 * h, 4 * w))?;
        ensure(g.value(back) == &img, || format!("{}: patch round trip is not exact", tag()))?;
    }

    // masked shifted-window attention against the per-region oracle
    let mut worst = 0.0f64;
    let mut attn_cases = 0;
    for &(h, w, spec, m) in configs.iter().filter(|c| c.0 <= 8 && c.1 <= 8) {
        let mut store = ParamStore::new();
        let (mha, bias) = {
            let mut init = Init::new(&mut store, &mut rng);
            (ok(MhaParams::new(&mut init, "a", 8, 2))?, RelPosBias::new(&mut init, "b", &spec, 2))
        };
        // bias tables start near zero; make them matter
        for v in store.get_mut(bias.table).data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let x = rand_t(&mut rng, &[m, h * w, 8]);
        let mut g = Graph::no_grad();
        let xv = g.constant(x.clone());
        let (y, _) = ok(mw_mha(&mut g, &store, xv, h, w, &mha, &bias, &spec, false))?;
        let want = brute_window_attention(&store, &mha, &bias, &x, m, h, w, &spec);
        for (a, b) in g.value(y).data().iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
        attn_cases += 1;
    }
    ensure(worst <= 1e-10, || format!("windowed attention differs from the oracle by {worst:.2e}"))?;
    Ok(format!(
        "{} layouts exact, {attn_cases} attention cases within {worst:.1e}",
        configs.len()
    ))
}

// ---------------------------------------------------------------------
// 3. scenarios

fn small_model(p: usize, seed: u64) -> Result<Mmt, String> {
    ok(Mmt::new(
        MmtConfig {
            n_contrasts: p,
            channels: 1,
            window: (2, 2),
            depth: 2,
        },
        seed,
    ))
}

fn c3_scenarios() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut counts = Vec::new();
    for p in 2..=4 {
        let model = small_model(p, p as u64)?;
        let slice = images(&mut rng, p, 16, 16);
        let scenarios = ContrastScenario::all(p);
        ensure(scenarios.len() == (1 << p) - 2, || format!("P={p}: {} scenarios", scenarios.len()))?;
        for sc in &scenarios {
            let mut g = Graph::new();
            let x = g.input(select_contrasts(&slice, &sc.available));
            let targets: Vec<usize> = sc.missing.iter().chain(&sc.available).copied().collect();
            let outs = ok(model.forward(&mut g, x, &sc.available, &targets))?;
            let truths: Vec<Var> = targets.iter().map(|&t| g.constant(select_contrasts(&slice, &[t]))).collect();
            let nm = sc.missing.len();
            let l_s = ok(synthesis_loss(&mut g, &outs[..nm], &truths[..nm]))?;
            let l_r = ok(reconstruction_loss(&mut g, &outs[nm..], &truths[nm..]))?;
            let total = ok(generator_loss(&mut g, Some(l_r), l_s, None, &LossWeights::default()))?;
            ensure(g.value(total).item().is_finite(), || format!("P={p} {}: loss not finite", sc.bitstring()))?;
            ok(g.backward(total))?;
            let grads = g.param_grads(&model.params);
            let mut n = 0;
            for (id, name, _) in model.params.iter() {
                if let Some(t) = grads.get(id) {
                    n += 1;
                    ensure(t.data().iter().all(|v| v.is_finite()), || {
                        format!("P={p} {}: gradient of {name} not finite", sc.bitstring())
                    })?;
                }
            }
            ensure(n > 0, || format!("P={p} {}: no parameter gradients", sc.bitstring()))?;
            ensure(g.grad(x).is_some(), || format!("P={p} {}: no input gradient", sc.bitstring()))?;
        }
        counts.push(scenarios.len());
    }

    let model = small_model(4, 44)?;
    let data: Vec<Tensor> = (0..2).map(|_| images(&mut rng, 4, 16, 16)).collect();
    let report = ok(evaluate(&model, &data, ScenarioSet::All))?;
    ensure(report.rows.len() == 14, || format!("P=4 report has {} rows", report.rows.len()))?;
    let bits: BTreeSet<String> = report.rows.iter().map(|r| r.scenario.bitstring()).collect();
    let expected: BTreeSet<String> = (1..15u32).map(|b| format!("{b:04b}")).collect();
    ensure(bits == expected, || format!("P=4 report rows {bits:?}"))?;
    let inputs: Vec<usize> = report.rows.iter().map(|r| r.scenario.available.len()).collect();
    ensure(inputs.windows(2).all(|p| p[0] <= p[1]), || format!("rows not grouped by input count: {inputs:?}"))?;
    for row in &report.rows {
        for c in 0..4 {
            let missing = row.scenario.missing.contains(&c);
            ensure(row.cells[c].is_some() == missing, || format!("row {} cell {c}", row.scenario.bitstring()))?;
        }
    }
    ensure(report.to_csv().lines().count() == 15, || "P=4 CSV is not header + 14 rows".into())?;
    Ok(format!("scenarios per P=2,3,4: {counts:?}; P=4 report has 14 rows"))
}

// ---------------------------------------------------------------------
// 4. attention invariants

fn rows_sum_to_one(t: &Tensor) -> f64 {
    let n = *t.shape().last().unwrap();
    t.data()
        .chunks_exact(n)
        .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max)
}

fn c4_attention() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_row = 0.0f64;
    let mut worst_sum = 0.0f64;
    let mut records = 0;

    // encoder-style self-attention, regular and shifted
    for (m, spec) in [(1, ok(WindowSpec::new(2, 2))?), (3, ok(WindowSpec::new(4, 4))?.shifted())] {
        let mut store = ParamStore::new();
        let (mha, bias) = {
            let mut init = Init::new(&mut store, &mut rng);
            (ok(MhaParams::new(&mut init, "a", 16, 2))?, RelPosBias::new(&mut init, "b", &spec, 2))
        };
        let mut g = Graph::no_grad();
        let x = g.constant(rand_t(&mut rng, &[m, 64, 16]));
        let (_, wts) = ok(mw_mha(&mut g, &store, x, 8, 8, &mha, &bias, &spec, true))?;
        worst_row = worst_row.max(rows_sum_to_one(&wts.unwrap()));
    }

    for p in [2, 3, 4] {
        let model = small_model(p, 40 + p as u64)?;
        let slice = images(&mut rng, p, 16, 16);
        for sc in ContrastScenario::all(p) {
            let mut g = Graph::no_grad();
            let x = g.constant(select_contrasts(&slice, &sc.available));
            let pyr = ok(model.encode(&mut g, x, &sc.available))?;
            for t in 0..p {
                let (_, rec) = ok(model.decode(&mut g, &pyr, t, true))?;
                for layer in &rec.layers {
                    worst_row = worst_row.max(rows_sum_to_one(&layer.weights));
                }
                let report = ok(contribution_percentages(&rec))?;
                let total: f64 = report.percentages.iter().sum();
                worst_sum = worst_sum.max((total - 100.0).abs());
                if sc.available.len() == 1 {
                    ensure(report.percentages == [100.0], || {
                        format!("single input {}: {:?}", sc.bitstring(), report.percentages)
                    })?;
                }
                records += 1;
            }
        }
    }
    ensure(worst_row < 1e-6, || format!("softmax row off by {worst_row:.2e}"))?;
    ensure(worst_sum < 1e-6, || format!("contributions off 100 by {worst_sum:.2e}"))?;
    Ok(format!(
        "{records} decoder records; worst row deviation {worst_row:.1e}, worst percentage sum deviation {worst_sum:.1e}"
    ))
}

// ---------------------------------------------------------------------
// 5. losses

fn mean_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

fn mean_sq(a: &[f64], target: f64) -> f64 {
    a.iter().map(|x| (x - target) * (x - target)).sum::<f64>() / a.len() as f64
}

fn c5_losses() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    let mut cases = 0;
    for trial in 0..200 {
        let n = 1 + trial % 3;
        let side = 4 + 4 * (trial % 2);
        let outs: Vec<Tensor> = (0..n).map(|_| rand_t(&mut rng, &[1, 1, side, side])).collect();
        let truths: Vec<Tensor> = (0..n).map(|_| rand_t(&mut rng, &[1, 1, side, side])).collect();
        let d_fake: Vec<Tensor> = (0..n).map(|_| rand_t(&mut rng, &[1, 1, 2, 2])).collect();
        let d_real: Vec<Tensor> = (0..n).map(|_| rand_t(&mut rng, &[1, 1, 2, 2])).collect();
        let labels = Labels::sample(&mut rng);
        let weights = LossWeights {
            lambda_r: rng.random_range(0.0..10.0),
            lambda_s: rng.random_range(0.0..30.0),
            lambda_adv: rng.random_range(0.0..1.0),
        };

        let mut g = Graph::no_grad();
        let vars = |g: &mut Graph<'_>, ts: &[Tensor]| ts.iter().map(|t| g.constant(t.clone())).collect::<Vec<_>>();
        let (o, t, f, r) = (vars(&mut g, &outs), vars(&mut g, &truths), vars(&mut g, &d_fake), vars(&mut g, &d_real));
        let l_s = ok(synthesis_loss(&mut g, &o, &t))?;
        let l_r = ok(reconstruction_loss(&mut g, &t, &o))?;
        let l_d = ok(discriminator_loss(&mut g, &f, &r, labels))?;
        let l_adv = ok(generator_adv_loss(&mut g, &f, labels))?;
        let total = ok(generator_loss(&mut g, Some(l_r), l_s, Some(l_adv), &weights))?;

        let nf = n as f64;
        let want_s = outs.iter().zip(&truths).map(|(a, b)| mean_abs(a.data(), b.data())).sum::<f64>() / nf;
        let want_d = d_fake
            .iter()
            .zip(&d_real)
            .map(|(a, b)| mean_sq(a.data(), labels.fake) + mean_sq(b.data(), labels.real))
            .sum::<f64>()
            / nf;
        let want_adv = d_fake.iter().map(|a| mean_sq(a.data(), labels.real)).sum::<f64>() / nf;
        let want_total = weights.lambda_r * want_s + weights.lambda_s * want_s + weights.lambda_adv * want_adv;
        for (got, want) in [
            (g.value(l_s).item(), want_s),
            (g.value(l_r).item(), want_s),
            (g.value(l_d).item(), want_d),
            (g.value(l_adv).item(), want_adv),
            (g.value(total).item(), want_total),
        ] {
            worst = worst.max((got - want).abs());
            cases += 1;
        }
    }
    ensure(worst <= 1e-12, || format!("loss differs from brute force by {worst:.2e}"))?;

    let mut lrng = ChaCha8Rng::seed_from_u64(8);
    let (mut fake, mut real) = ((f64::INFINITY, f64::NEG_INFINITY), (f64::INFINITY, f64::NEG_INFINITY));
    for _ in 0..10_000 {
        let l = Labels::sample(&mut lrng);
        ensure((0.0..=0.1).contains(&l.fake), || format!("fake label {}", l.fake))?;
        ensure((0.9..=1.0).contains(&l.real), || format!("real label {}", l.real))?;
        fake = (fake.0.min(l.fake), fake.1.max(l.fake));
        real = (real.0.min(l.real), real.1.max(l.real));
    }
    Ok(format!(
        "{cases} loss values within {worst:.1e}; 10^4 labels: fake in [{:.4}, {:.4}], real in [{:.4}, {:.4}]",
        fake.0, fake.1, real.0, real.1
    ))
}

// ---------------------------------------------------------------------
// 6 and 7. overfit run

struct Overfit {
    model: Mmt,
    data: Vec<Tensor>,
    steps: usize,
    secs: f64,
}

static OVERFIT: OnceLock<Result<Overfit, String>> = OnceLock::new();

const OVERFIT_STEPS: usize = 2000;

fn overfit() -> &'static Result<Overfit, String> {
    OVERFIT.get_or_init(|| {
        let start = Instant::now();
        let vols = ok(generate_phantom(&PhantomConfig {
            height: 16,
            width: 16,
            depth: 8,
            n_subjects: 1,
            seed: 1,
            ..Default::default()
        }))?;
        let vols: Vec<MultiContrastVolume> = vols.iter().map(mean_normalize).collect::<mmt::Result<_>>().map_err(|e| e.to_string())?;
        let data = slices(&vols);
        let batch = 4;
        let cfg = TrainConfig {
            epochs: OVERFIT_STEPS / data.len().div_ceil(batch),
            batch_size: batch,
            lr_g: 1e-3,
            weight_decay: 0.01,
            clip_norm: 1.0,
            pos_bias_lr_scale: 100.0,
            seed: 1,
            weights: LossWeights {
                lambda_adv: 0.0,
                ..Default::default()
            },
            eval_every: usize::MAX,
            eval_size: 1,
            ..Default::default()
        };
        let model = Mmt::new(
            MmtConfig {
                n_contrasts: 3,
                channels: 6,
                window: (4, 4),
                depth: 2,
            },
            1,
        )
        .map_err(|e| e.to_string())?;
        let mut t = Trainer::new(data.clone(), vec![], model, cfg).map_err(|e| e.to_string())?;
        while !t.is_done() {
            t.train_step().map_err(|e| e.to_string())?;
        }
        Ok(Overfit {
            steps: t.step(),
            model: t.model,
            data,
            secs: start.elapsed().as_secs_f64(),
        })
    })
}

fn c6_overfit() -> Outcome {
    let run = overfit().as_ref().map_err(|e| e.clone())?;
    ensure(run.steps <= OVERFIT_STEPS, || format!("{} steps", run.steps))?;
    let report = ok(evaluate(&run.model, &run.data, ScenarioSet::All))?;
    let (mut min_psnr, mut min_ssim) = (f64::INFINITY, f64::INFINITY);
    let mut failures = Vec::new();
    for row in &report.rows {
        let cells: Vec<_> = row.cells.iter().flatten().collect();
        let n = cells.iter().map(|c| c.psnr.len()).sum::<usize>() as f64;
        let psnr = cells.iter().flat_map(|c| &c.psnr).sum::<f64>() / n;
        let ssim = cells.iter().flat_map(|c| &c.ssim).sum::<f64>() / n;
        min_psnr = min_psnr.min(psnr);
        min_ssim = min_ssim.min(ssim);
        if psnr < 30.0 || ssim < 0.95 {
            failures.push(format!("{}: {psnr:.2} dB / {ssim:.4}", row.scenario.bitstring()));
        }
    }
    ensure(failures.is_empty(), || format!("below 30 dB / 0.95: {}", failures.join("; ")))?;
    ensure(run.secs <= 900.0, || format!("training took {:.0}s, budget 900s", run.secs))?;
    Ok(format!(
        "{} steps in {:.0}s; worst scenario {min_psnr:.2} dB, SSIM {min_ssim:.4}",
        run.steps, run.secs
    ))
}

fn c7_reconstruction() -> Outcome {
    let run = overfit().as_ref().map_err(|e| e.clone())?;
    let mut worst = (f64::INFINITY, String::new());
    for sc in ContrastScenario::all(3) {
        let mut values = Vec::new();
        for slice in &run.data {
            let mut g = Graph::no_grad();
            let x = g.constant(select_contrasts(slice, &sc.available));
            let outs = ok(run.model.forward(&mut g, x, &sc.available, &sc.available))?;
            for (&o, &a) in outs.iter().zip(&sc.available) {
                values.push(ok(psnr_ref(g.value(o).data(), select_contrasts(slice, &[a]).data()))?);
            }
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        if mean < worst.0 {
            worst = (mean, sc.bitstring());
        }
    }
    ensure(worst.0 >= 35.0, || format!("scenario {} reconstructs at {:.2} dB", worst.1, worst.0))?;
    Ok(format!("worst scenario {} at {:.2} dB", worst.1, worst.0))
}

// ---------------------------------------------------------------------
// 8. cost

fn c8_flops() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (m, d) = (2, 8);
    let spec = ok(WindowSpec::new(4, 4))?;
    let mut store = ParamStore::new();
    let (mha, bias) = {
        let mut init = Init::new(&mut store, &mut rng);
        (ok(MhaParams::new(&mut init, "a", d, 1))?, RelPosBias::new(&mut init, "b", &spec, 1))
    };
    let mut counts = Vec::new();
    for (h, w) in [(8, 16), (16, 16)] {
        let x = rand_t(&mut rng, &[m, h * w, d]);
        let mut row = Vec::new();
        for windowed in [true, false] {
            for spec in [spec, spec.shifted()] {
                let mut g = Graph::no_grad();
                let xv = g.constant(x.clone());
                flops::reset();
                if windowed {
                    ok(mw_mha(&mut g, &store, xv, h, w, &mha, &bias, &spec, false))?;
                } else {
                    ok(global_mha(&mut g, &store, xv, &mha))?;
                }
                row.push(flops::multiplies() as f64);
            }
        }
        counts.push(row);
    }
    let ratios: Vec<f64> = counts[0].iter().zip(&counts[1]).map(|(a, b)| b / a).collect();
    let (win, glob) = (&ratios[..2], &ratios[2..]);
    for &r in win {
        ensure((r - 2.0).abs() <= 0.1, || format!("windowed ratio {r:.3}"))?;
    }
    for &r in glob {
        ensure((r - 4.0).abs() <= 0.2, || format!("global ratio {r:.3}"))?;
    }
    Ok(format!(
        "256 -> 512 tokens: windowed x{:.3} (shifted x{:.3}), global x{:.3}",
        win[0], win[1], glob[0]
    ))
}

// ---------------------------------------------------------------------
// 9. determinism

fn small_run(data: &[Tensor], steps_first: usize) -> Result<(Vec<u8>, Option<Vec<u8>>), String> {
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 2,
        seed: 9,
        eval_every: 2,
        eval_size: 1,
        ..Default::default()
    };
    let mut t = ok(Trainer::new(data.to_vec(), vec![], small_model(3, 9)?, cfg))?;
    let mut mid = None;
    while !t.is_done() {
        ok(t.train_step())?;
        if t.step() == steps_first {
            mid = Some(ok(t.checkpoint().encode())?);
        }
    }
    Ok((ok(t.checkpoint().encode())?, mid))
}

fn c9_determinism() -> Outcome {
    let cfg = PhantomConfig {
        height: 16,
        width: 16,
        depth: 2,
        n_subjects: 2,
        seed: 9,
        lesion_prob: 1.0,
        lesion_contrasts: vec![1],
        ..Default::default()
    };
    let a = ok(generate_phantom(&cfg))?;
    let b = ok(generate_phantom(&cfg))?;
    ensure(a.iter().map(encode_volume).eq(b.iter().map(encode_volume)), || "phantom differs".into())?;
    let vols: Vec<MultiContrastVolume> = a.iter().map(mean_normalize).collect::<mmt::Result<_>>().map_err(|e| e.to_string())?;
    let data = slices(&vols);

    let (first, mid) = small_run(&data, 3)?;
    let (second, _) = small_run(&data, 3)?;
    ensure(first == second, || "two runs gave different checkpoints".into())?;

    let mid = mid.ok_or("no mid-run checkpoint")?;
    let ck = ok(Checkpoint::decode(&mid, std::path::Path::new("mid")))?;
    let mut resumed = ok(Trainer::from_checkpoint(data.clone(), vec![], &ck))?;
    while !resumed.is_done() {
        ok(resumed.train_step())?;
    }
    ensure(ok(resumed.checkpoint().encode())? == first, || "resumed run differs from uninterrupted run".into())?;

    let ck = ok(Checkpoint::decode(&first, std::path::Path::new("final")))?;
    let m1 = ok(load_model(&ck))?;
    let m2 = ok(load_model(&ck))?;
    let r1 = ok(evaluate(&m1, &data, ScenarioSet::All))?.to_csv();
    let r2 = ok(evaluate(&m2, &data, ScenarioSet::All))?.to_csv();
    ensure(r1 == r2, || "reports differ".into())?;
    ensure(ok(model_checkpoint(&m1).encode())? == ok(model_checkpoint(&m2).encode())?, || {
        "reloaded models differ".into()
    })?;
    Ok(format!(
        "checkpoints ({} bytes) and reports identical across runs; resume from step 3 is bit-exact",
        first.len()
    ))
}

// ---------------------------------------------------------------------
// 10. lesion contributions

const LESION_SUBJECTS: usize = 8;
const LESION_STEPS: usize = 2000;

fn c10_lesion() -> Outcome {
    let start = Instant::now();
    let cfg = PhantomConfig {
        height: 32,
        width: 32,
        depth: 1,
        n_subjects: LESION_SUBJECTS,
        seed: 1,
        lesion_prob: 1.0,
        lesion_contrasts: vec![1, 2],
        lesion_radius: (0.25, 0.35),
        ..Default::default()
    };
    let raw = ok(generate_phantom(&cfg))?;
    let mut vols = Vec::new();
    for v in &raw {
        let mut n = ok(mean_normalize(v))?;
        n.lesion = v.lesion;
        vols.push(n);
    }
    let data = slices(&vols);
    let batch = 2;
    let train = TrainConfig {
        epochs: LESION_STEPS / data.len().div_ceil(batch),
        batch_size: batch,
        lr_g: 1e-3,
        pos_bias_lr_scale: 100.0,
        seed: 1,
        weights: LossWeights {
            lambda_adv: 0.0,
            ..Default::default()
        },
        eval_every: usize::MAX,
        eval_size: 1,
        ..Default::default()
    };
    let model = ok(Mmt::new(
        MmtConfig {
            n_contrasts: 3,
            channels: 6,
            window: (4, 4),
            depth: 2,
        },
        1,
    ))?;
    let mut t = ok(Trainer::new(data, vec![], model, train))?;
    while !t.is_done() {
        ok(t.train_step())?;
    }

    // synthesise contrast 2 from {1, 3} (zero-based: 1 from {0, 2})
    let (available, target, probe) = ([0usize, 2], 1usize, 2usize);
    let (mut inside, mut outside, mut wins) = (0.0, 0.0, 0);
    for v in &vols {
        let b = v.lesion.ok_or_else(|| format!("{} has no lesion", v.subject_id))?;
        let slice = v.slice_tensor(b.z0);
        let mut g = Graph::no_grad();
        let x = g.constant(select_contrasts(&slice, &available));
        let pyr = ok(t.model.encode(&mut g, x, &available))?;
        let (_, rec) = ok(t.model.decode(&mut g, &pyr, target, true))?;
        let pb = PixelBox {
            y0: b.y0,
            y1: b.y1,
            x0: b.x0,
            x1: b.x1,
        };
        let hw = (v.height, v.width);
        let pin = ok(contribution_percentages_where(&rec, |l, p| token_overlaps(l, p, &pb, hw)))?;
        let pout = ok(contribution_percentages_where(&rec, |l, p| !token_overlaps(l, p, &pb, hw)))?;
        let (a, o) = (pin.percent_of(probe).unwrap(), pout.percent_of(probe).unwrap());
        inside += a;
        outside += o;
        if a > o {
            wins += 1;
        }
    }
    let n = vols.len() as f64;
    let (inside, outside) = (inside / n, outside / n);
    let detail = format!(
        "contrast 3 share inside {inside:.3}% vs outside {outside:.3}% (mean over {} subjects, higher inside for {wins}); {:.0}s",
        vols.len(),
        start.elapsed().as_secs_f64()
    );
    ensure(inside > outside, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------------

type Criterion = (usize, &'static str, fn() -> Outcome);

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        (1, "gradient correctness", c1_gradients),
        (2, "geometry oracle", c2_geometry),
        (3, "scenario completeness", c3_scenarios),
        (4, "attention invariants", c4_attention),
        (5, "loss formulas", c5_losses),
        (6, "overfit convergence", c6_overfit),
        (7, "reconstruction regularizer", c7_reconstruction),
        (8, "windowed attention cost", c8_flops),
        (9, "determinism", c9_determinism),
        (10, "lesion contribution", c10_lesion),
    ];
    let only: Option<BTreeSet<usize>> = std::env::var("MMT_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let (mut run, mut passed) = (0, 0);
    for (n, name, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        run += 1;
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .map_or("panic".into(), |m| format!("panic: {m}")))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => {
                passed += 1;
                println!("criterion {n} {name}: PASS ({detail}) [{secs:.1}s]");
            }
            Err(detail) => println!("criterion {n} {name}: FAIL ({detail}) [{secs:.1}s]"),
        }
    }
    println!("acceptance: {passed}/{run} criteria passed");
    if passed == run {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
