//! Checks shared by the integration tests and the acceptance report. Each
//! returns a one-line summary on success and a reason on failure.

#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use candle_core::Tensor;
use microau::config::{Config, Fusion, Pooling, ScorerSharing};
use microau::encoders::TokenGrid;
use microau::gsd::{gd_loss, gsd_forward, GdaParams};
use microau::losses::{
    miauc_label_matrix, miauc_loss, multitask_loss, multitask_loss_from_logits, similarity_matrix, total_loss,
    ContrastiveBatch,
};
use microau::lsi::{lsi_forward, pta_fuse, pta_weights, PtaScorer};
use microau::mer::classify_emotion;
use microau::nn::{device, Init, Param, ParamGroup};
use microau::preprocess::{gather_au_tokens, map_landmark_to_token, Landmarks};
use microau::task::{AuEntry, AuTaskSpec};
use microau::train::{loso_split, lr_schedule, MetricAccumulator};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = Result<String, String>;

fn fail<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn tensor(rng: &mut ChaCha8Rng, dims: &[usize], scale: f64) -> Tensor {
    let n: usize = dims.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::from_vec(data, dims, &device()).unwrap()
}

fn input(name: &str, value: Tensor) -> Param {
    Param::new(name, ParamGroup::Head, value).unwrap()
}

fn flat(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

// ---------------------------------------------------------------------------
// Gradients

const FD_STEP: f64 = 1e-6;
const FD_TOL: f64 = 1e-3;

/// Compares backprop against central differences for every entry of every
/// parameter. Entries where both gradients are below 1e-8 count as equal.
fn fd_check(label: &str, params: &[&Param], f: &dyn Fn() -> Tensor) -> Result<usize, String> {
    let grads = f().backward().map_err(fail)?;
    let mut checked = 0;
    for p in params {
        let base = flat(p.raw());
        let analytic = grads.get(p.raw()).map(flat).unwrap_or_else(|| vec![0.0; base.len()]);
        let dims = p.dims();
        for i in 0..base.len() {
            let mut shifted = base.clone();
            shifted[i] = base[i] + FD_STEP;
            p.set(&Tensor::from_vec(shifted.clone(), dims.as_slice(), &device()).unwrap()).unwrap();
            let up = f().to_scalar::<f64>().unwrap();
            shifted[i] = base[i] - FD_STEP;
            p.set(&Tensor::from_vec(shifted, dims.as_slice(), &device()).unwrap()).unwrap();
            let down = f().to_scalar::<f64>().unwrap();
            p.set(&Tensor::from_vec(base.clone(), dims.as_slice(), &device()).unwrap()).unwrap();
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic[i];
            let scale = a.abs().max(numeric.abs());
            if scale > 1e-8 && (a - numeric).abs() / scale > FD_TOL {
                return Err(format!("{label}: `{}`[{i}] analytic {a:e} vs numeric {numeric:e}", p.name));
            }
            checked += 1;
        }
    }
    Ok(checked)
}

const D: usize = 8;
const DT: usize = 8;
const N: usize = 3;
const NL: usize = 4;
const B: usize = 4;

fn labels_b_n(rng: &mut ChaCha8Rng) -> Vec<Vec<u8>> {
    (0..B).map(|_| (0..N).map(|_| rng.gen_range(0..2u8)).collect()).collect()
}

fn label_tensor(labels: &[Vec<u8>]) -> Tensor {
    let data: Vec<f64> = labels.iter().flatten().map(|&y| y as f64).collect();
    Tensor::from_vec(data, (labels.len(), labels[0].len()), &device()).unwrap()
}

/// Per-AU unit rows (B, d) from a (B, N, d) tensor.
fn split_aus(t: &Tensor) -> Vec<Tensor> {
    (0..t.dim(1).unwrap()).map(|n| t.narrow(1, n, 1).unwrap().squeeze(1).unwrap()).collect()
}

pub fn gradient_suite() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut total = 0;

    // PTA fusion of one AU group, weighted by random probes.
    let mut init_rng = ChaCha8Rng::seed_from_u64(3);
    let scorer = PtaScorer::new(&mut Init::new(&mut init_rng, ParamGroup::Head), 1, D, ScorerSharing::PerAu)
        .map_err(fail)?;
    let group = input("group", tensor(&mut rng, &[B, NL, D], 1.0));
    let probe = tensor(&mut rng, &[B, D], 1.0);
    let mut params = vec![&group];
    params.extend(scorer.params());
    total += fd_check("pta_fuse", &params, &|| {
        (pta_fuse(scorer.for_au(0), &group.tensor()).unwrap() * &probe).unwrap().sum_all().unwrap()
    })?;

    // The GDA stack: attention, dependency weights, global feature and heads.
    let mut init_rng = ChaCha8Rng::seed_from_u64(4);
    let gda = GdaParams::new(&mut Init::new(&mut init_rng, ParamGroup::Head), N, D, Fusion::Gda).map_err(fail)?;
    let features = input("features", tensor(&mut rng, &[B, N, D], 1.0));
    let (p_att, p_dep, p_glob, p_prob) = (
        tensor(&mut rng, &[B, N, N], 1.0),
        tensor(&mut rng, &[B, N], 1.0),
        tensor(&mut rng, &[B, D], 1.0),
        tensor(&mut rng, &[B, N, 2], 1.0),
    );
    let mut params = vec![&features];
    params.extend(gda.params());
    total += fd_check("gda", &params, &|| {
        let out = gsd_forward(&gda, &features.tensor(), Fusion::Gda).unwrap();
        let terms = [
            (out.attention.unwrap() * &p_att).unwrap().sum_all().unwrap(),
            (out.dep_weights.unwrap() * &p_dep).unwrap().sum_all().unwrap(),
            (out.global * &p_glob).unwrap().sum_all().unwrap(),
            (out.probs * &p_prob).unwrap().sum_all().unwrap(),
        ];
        terms.iter().skip(1).fold(terms[0].clone(), |a, t| (a + t).unwrap())
    })?;

    // GD loss against a multi-hot label.
    let labels = labels_b_n(&mut rng);
    let y = label_tensor(&labels);
    let dep = input("dep_weights", tensor(&mut rng, &[B, N], 1.0));
    total += fd_check("gd_loss", &[&dep], &|| gd_loss(&dep.tensor(), &y).unwrap())?;

    // MiAUC loss over visual features, text features and the scale.
    let visual = input("visual", tensor(&mut rng, &[B, N, DT], 1.0));
    let text = input("text", tensor(&mut rng, &[B, N, DT], 1.0));
    let scale = input("scale", Tensor::new(3.0f64, &device()).unwrap());
    total += fd_check("miauc_loss", &[&visual, &text, &scale], &|| {
        let batch = ContrastiveBatch {
            visual: split_aus(&visual.tensor()),
            text: split_aus(&text.tensor()),
            labels: (0..N).map(|n| labels.iter().map(|r| r[n]).collect()).collect(),
        };
        miauc_loss(&batch, &scale.tensor()).unwrap()
    })?;

    // Multi-task loss on probabilities and on logits.
    let raw = tensor(&mut rng, &[B, N, 2], 1.0);
    let probs = input("probs", microau::nn::softmax(&raw, 2).unwrap());
    total += fd_check("multitask_loss", &[&probs], &|| multitask_loss(&probs.tensor(), &labels).unwrap())?;
    let logits = input("logits", raw);
    total += fd_check("multitask_loss_from_logits", &[&logits], &|| {
        multitask_loss_from_logits(&logits.tensor(), &labels).unwrap()
    })?;

    // The composite objective, through every stage from token groups on.
    let mut init_rng = ChaCha8Rng::seed_from_u64(5);
    let mut init = Init::new(&mut init_rng, ParamGroup::Head);
    let scorer = PtaScorer::new(&mut init, N, D, ScorerSharing::PerAu).map_err(fail)?;
    let gda = GdaParams::new(&mut init, N, D, Fusion::Gda).map_err(fail)?;
    let proj = microau::losses::VisualProjection::new(&mut init, D, DT).map_err(fail)?;
    let groups: Vec<Param> = (0..N).map(|n| input(&format!("g{n}"), tensor(&mut rng, &[B, NL, D], 1.0))).collect();
    let text_pos = tensor(&mut rng, &[N, DT], 1.0);
    let text_neg = tensor(&mut rng, &[N, DT], 1.0);
    let log_scale = input("log_scale", Tensor::new(1.5f64, &device()).unwrap());
    let (alpha, beta) = (0.6, 1.0);
    let mut params: Vec<&Param> = groups.iter().collect();
    params.extend(scorer.params());
    params.extend(gda.params());
    params.extend(proj.params());
    params.push(&log_scale);
    total += fd_check("total_loss", &params, &|| {
        let gs: Vec<Tensor> = groups.iter().map(Param::tensor).collect();
        let fused = lsi_forward(Some(&scorer), &gs, Pooling::Pta).unwrap();
        let out = gsd_forward(&gda, &fused.features, Fusion::Gda).unwrap();
        let mt = multitask_loss_from_logits(&out.logits, &labels).unwrap();
        let gd = gd_loss(out.dep_weights.as_ref().unwrap(), &y).unwrap();
        let projected = proj.forward(&out.enhanced).unwrap();
        let batch = ContrastiveBatch {
            visual: split_aus(&projected),
            text: microau::losses::matched_text(&text_pos, &text_neg, &labels).unwrap(),
            labels: (0..N).map(|n| labels.iter().map(|r| r[n]).collect()).collect(),
        };
        let cl = miauc_loss(&batch, &log_scale.tensor().exp().unwrap()).unwrap();
        total_loss(&mt, &cl, &gd, alpha, beta).unwrap()
    })?;

    // total_loss itself is affine in its three terms.
    let parts: Vec<Param> =
        ["mt", "cl", "gd"].iter().map(|n| input(n, Tensor::new(rng.gen_range(0.1..2.0), &device()).unwrap())).collect();
    let refs: Vec<&Param> = parts.iter().collect();
    total += fd_check("total_loss terms", &refs, &|| {
        total_loss(&parts[0].tensor(), &parts[1].tensor(), &parts[2].tensor(), alpha, beta).unwrap()
    })?;

    let secs = start.elapsed().as_secs_f64();
    if secs > 30.0 {
        return Err(format!("gradient suite took {secs:.1}s"));
    }
    Ok(format!("{total} partial derivatives within {FD_TOL:e} relative, {secs:.1}s"))
}

// ---------------------------------------------------------------------------
// Oracles

pub const ORACLE_CASES: usize = 1000;

fn oracle_label_matrix(labels: &[u8]) -> Vec<Vec<f64>> {
    let mut m = vec![vec![0.0; labels.len()]; labels.len()];
    for i in 0..labels.len() {
        for j in 0..labels.len() {
            if labels[i] == labels[j] {
                m[i][j] = 1.0;
            }
        }
    }
    m
}

fn oracle_cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for k in 0..a.len() {
        dot += a[k] * b[k];
        na += a[k] * a[k];
        nb += b[k] * b[k];
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// Searches the cell by comparing against cell boundaries instead of
/// dividing: row r covers y with r*h0 <= y*h < (r+1)*h0.
fn oracle_cell(point: [f64; 2], image: (usize, usize), grid: (usize, usize)) -> (usize, usize) {
    let (h0, w0) = image;
    let (h, w) = grid;
    let mut row = h - 1;
    for r in 0..h {
        if point[1] * (h as f64) < ((r + 1) * h0) as f64 {
            row = r;
            break;
        }
    }
    let mut col = w - 1;
    for c in 0..w {
        if point[0] * (w as f64) < ((c + 1) * w0) as f64 {
            col = c;
            break;
        }
    }
    (row, col)
}

/// Landmark coordinate on a 1/8 pixel lattice inside [0, size).
fn lattice(rng: &mut ChaCha8Rng, size: usize) -> f64 {
    rng.gen_range(0..size * 8) as f64 / 8.0
}

pub fn oracle_suite() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for case in 0..ORACLE_CASES {
        let b = rng.gen_range(1..12);
        let labels: Vec<u8> = (0..b).map(|_| rng.gen_range(0..2)).collect();
        if miauc_label_matrix(&labels) != oracle_label_matrix(&labels) {
            return Err(format!("label matrix case {case}: {labels:?}"));
        }

        let d = rng.gen_range(1..10);
        let rows_v = rng.gen_range(1..8);
        let rows_t = rng.gen_range(1..8);
        let v = tensor(&mut rng, &[rows_v, d], 2.0);
        let t = tensor(&mut rng, &[rows_t, d], 2.0);
        let got = similarity_matrix(&v, &t).map_err(fail)?.to_vec2::<f64>().map_err(fail)?;
        let (vr, tr) = (v.to_vec2::<f64>().unwrap(), t.to_vec2::<f64>().unwrap());
        for i in 0..rows_v {
            for j in 0..rows_t {
                let want = oracle_cosine(&vr[i], &tr[j]);
                if (got[i][j] - want).abs() > 1e-6 {
                    return Err(format!("similarity case {case} ({i},{j}): {} vs {want}", got[i][j]));
                }
            }
        }

        let image = (rng.gen_range(8..300), rng.gen_range(8..300));
        let grid = (rng.gen_range(1..16), rng.gen_range(1..16));
        let p = [lattice(&mut rng, image.1), lattice(&mut rng, image.0)];
        let got = map_landmark_to_token(p, image, grid).map_err(fail)?;
        if got != oracle_cell(p, image, grid) {
            return Err(format!("token mapping case {case}: {p:?} in {image:?} on {grid:?} gave {got:?}"));
        }

        // Gather over a random task on a random token grid.
        let (h, w, dg) = (rng.gen_range(1..9), rng.gen_range(1..9), rng.gen_range(1..6));
        let image = (rng.gen_range(16..256), rng.gen_range(16..256));
        let n_points = 68;
        let points: Vec<[f64; 2]> = (0..n_points).map(|_| [lattice(&mut rng, image.1), lattice(&mut rng, image.0)]).collect();
        let n_aus = rng.gen_range(1..5);
        let mut pool: Vec<usize> = (0..n_points).collect();
        pool.shuffle(&mut rng);
        let aus: Vec<AuEntry> = (0..n_aus)
            .map(|k| AuEntry {
                id: k as u32 + 1,
                landmarks: pool[k * 4..k * 4 + rng.gen_range(1..5)].to_vec(),
                positive: format!("au {k} on"),
                negative: format!("au {k} off"),
            })
            .collect();
        let task = AuTaskSpec { aus };
        let tokens = tensor(&mut rng, &[h, w, dg], 1.0);
        let cube = flat(&tokens);
        let groups = gather_au_tokens(
            &TokenGrid::new(tokens).map_err(fail)?,
            &task,
            &Landmarks::new(points.clone()).map_err(fail)?,
            image,
        )
        .map_err(fail)?;
        for (n, au) in task.aus.iter().enumerate() {
            let got = groups.groups[n].to_vec2::<f64>().map_err(fail)?;
            for (k, &j) in au.landmarks.iter().enumerate() {
                let (r, c) = oracle_cell(points[j], image, (h, w));
                let want = &cube[(r * w + c) * dg..(r * w + c + 1) * dg];
                if got[k] != want {
                    return Err(format!("gather case {case}: AU {n} landmark {j}"));
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    if secs > 60.0 {
        return Err(format!("oracle suite took {secs:.1}s"));
    }
    Ok(format!("{ORACLE_CASES} cases each for 4 functions, {secs:.1}s"))
}

// ---------------------------------------------------------------------------
// Simplex invariants

fn is_simplex(rows: &[Vec<f64>]) -> bool {
    rows.iter().all(|r| r.iter().all(|v| *v >= 0.0) && (r.iter().sum::<f64>() - 1.0).abs() <= 1e-6)
}

pub fn simplex_suite() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for draw in 0..ORACLE_CASES {
        let (b, n, nl, d) = (rng.gen_range(1..5), rng.gen_range(1..6), rng.gen_range(1..6), 2 * rng.gen_range(1..5));
        let scale = [0.1, 1.0, 10.0, 100.0][draw % 4];
        let mut init_rng = ChaCha8Rng::seed_from_u64(draw as u64);
        let mut init = Init::new(&mut init_rng, ParamGroup::Head);
        let scorer = PtaScorer::new(&mut init, n, d, ScorerSharing::PerAu).map_err(fail)?;
        let gda = GdaParams::new(&mut init, n, d, Fusion::Gda).map_err(fail)?;
        let groups: Vec<Tensor> = (0..n).map(|_| tensor(&mut rng, &[b, nl, d], scale)).collect();
        for (k, g) in groups.iter().enumerate() {
            let w = pta_weights(scorer.for_au(k), g).map_err(fail)?.to_vec2::<f64>().map_err(fail)?;
            if !is_simplex(&w) {
                return Err(format!("PTA weights draw {draw}: {w:?}"));
            }
        }
        let fused = lsi_forward(Some(&scorer), &groups, Pooling::Pta).map_err(fail)?;
        let out = gsd_forward(&gda, &fused.features, Fusion::Gda).map_err(fail)?;
        let att: Vec<Vec<f64>> = out.attention.unwrap().to_vec3::<f64>().map_err(fail)?.concat();
        let dep = out.dep_weights.unwrap().to_vec2::<f64>().map_err(fail)?;
        let probs: Vec<Vec<f64>> = out.probs.to_vec3::<f64>().map_err(fail)?.concat();
        for (name, rows) in [("attention", &att), ("W_d", &dep), ("P_n", &probs)] {
            if !is_simplex(rows) {
                return Err(format!("{name} draw {draw} is off the simplex"));
            }
        }
    }
    Ok(format!("PTA weights, attention rows, W_d and P_n on the simplex over {ORACLE_CASES} draws"))
}

// ---------------------------------------------------------------------------
// Locality

pub fn locality_check() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut init_rng = ChaCha8Rng::seed_from_u64(42);
    let scorer = PtaScorer::new(&mut Init::new(&mut init_rng, ParamGroup::Head), 2, D, ScorerSharing::PerAu)
        .map_err(fail)?;
    let g1 = tensor(&mut rng, &[B, NL, D], 1.0);
    let g2 = input("group2", tensor(&mut rng, &[B, NL, D], 1.0));
    let before = lsi_forward(Some(&scorer), &[g1.clone(), g2.tensor()], Pooling::Pta).map_err(fail)?;
    let f1_before = flat(&before.features.narrow(1, 0, 1).unwrap());
    let f1_sum = before.features.narrow(1, 0, 1).unwrap().sum_all().unwrap();
    let grads = f1_sum.backward().map_err(fail)?;
    if let Some(g) = grads.get(g2.raw()) {
        if flat(g).iter().any(|v| *v != 0.0) {
            return Err("AU 1 feature has a nonzero gradient with respect to group 2".into());
        }
    }
    let perturbed = (g2.tensor() + tensor(&mut rng, &[B, NL, D], 5.0)).unwrap();
    let after = lsi_forward(Some(&scorer), &[g1, perturbed], Pooling::Pta).map_err(fail)?;
    let f1_after = flat(&after.features.narrow(1, 0, 1).unwrap());
    let f2_changed = flat(&after.features.narrow(1, 1, 1).unwrap()) != flat(&before.features.narrow(1, 1, 1).unwrap());
    let same = f1_before.iter().zip(&f1_after).all(|(a, b)| a.to_bits() == b.to_bits());
    if !same {
        return Err("AU 1 feature changed when group 2 was perturbed".into());
    }
    if !f2_changed {
        return Err("perturbing group 2 did not change AU 2".into());
    }
    Ok("AU 1 feature bitwise unchanged, zero cross-gradient".into())
}

// ---------------------------------------------------------------------------
// Closed forms

pub fn closed_forms() -> Check {
    let w = Tensor::new(&[0.25f64, 0.25, 0.25, 0.25], &device()).unwrap();
    let y = Tensor::new(&[1.0f64, 0.0, 0.0, 0.0], &device()).unwrap();
    let gd = gd_loss(&w, &y).map_err(fail)?.to_scalar::<f64>().map_err(fail)?;
    if gd != 0.1875 {
        return Err(format!("gd_loss(uniform, (1,0,0,0)) = {gd}"));
    }
    let uniform = Tensor::from_vec(vec![0.5f64; 8 * 2], (1, 8, 2), &device()).unwrap();
    let labels = vec![vec![1, 0, 1, 1, 0, 0, 1, 0]];
    let mt = multitask_loss(&uniform, &labels).map_err(fail)?.to_scalar::<f64>().map_err(fail)?;
    if (mt - 8.0 * std::f64::consts::LN_2).abs() > 1e-6 {
        return Err(format!("multitask loss at uniform predictions = {mt}"));
    }
    let config = Config::with_coefficients(0.6, 1.0);
    let close = |a: (f64, f64), b: (f64, f64)| (a.0 - b.0).abs() <= 1e-15 && (a.1 - b.1).abs() <= 1e-15;
    let (at39, at40) = (lr_schedule(&config, 39), lr_schedule(&config, 40));
    if !close(at39, (0.001, 0.01)) || !close(at40, (0.0001, 0.001)) {
        return Err(format!("lr_schedule epochs 39/40: {at39:?} {at40:?}"));
    }
    Ok(format!("gd 0.1875 exact, multitask {mt:.9} = 8 ln 2, lr {at39:?} -> {at40:?}"))
}

// ---------------------------------------------------------------------------
// Command line runs

pub fn bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_microau"))
}

pub struct Run {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

pub fn microau(args: &[&str]) -> Run {
    let out = Command::new(bin()).args(args).output().expect("binary runs");
    Run {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

pub fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

/// Generates the default synthetic set under `dir/data`.
pub fn synth(dir: &Path, seed: u64) -> Result<PathBuf, String> {
    let data = dir.join("data");
    let r = microau(&["synth", "--out", p(&data), "--seed", &seed.to_string()]);
    if r.code != 0 {
        return Err(format!("synth exited {}: {}", r.code, r.stderr));
    }
    Ok(data)
}

/// Trains on the synthetic set; returns the metrics file path.
pub fn train(data: &Path, out: &Path, extra: &[&str]) -> Result<PathBuf, String> {
    let config = data.join("train.toml");
    let manifest = data.join("manifest.csv");
    let mut args = vec!["train", "--config", p(&config), "--manifest", p(&manifest), "--out", p(out)];
    args.extend_from_slice(extra);
    let r = microau(&args);
    if r.code != 0 {
        return Err(format!("train {extra:?} exited {}: {}", r.code, r.stderr));
    }
    Ok(out.join("synthetic").join("metrics.json"))
}

pub fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).expect("file exists")).expect("valid json")
}

/// Criterion 7: the overfit run plus the two ablation flags.
pub fn synthetic_overfit(dir: &Path) -> Check {
    let start = Instant::now();
    let data = synth(dir, 1)?;
    let metrics = train(&data, &dir.join("base"), &[])?;
    let secs = start.elapsed().as_secs_f64();
    let m = read_json(&metrics);
    let (train_f1, test_f1) = (m["train"]["f1"].as_f64().unwrap(), m["test"]["f1"].as_f64().unwrap());
    if train_f1 < 0.99 || test_f1 < 0.9 {
        return Err(format!("train F1 {train_f1}, LOSO F1 {test_f1}"));
    }
    if secs > 300.0 {
        return Err(format!("synth and train took {secs:.0}s"));
    }
    let base = std::fs::read(&metrics).unwrap();
    for flag in [["--pooling", "meanpool"], ["--cl-variant", "none"]] {
        let other = train(&data, &dir.join(flag[1]), &flag)?;
        if std::fs::read(&other).unwrap() == base {
            return Err(format!("{} {} left the metrics file unchanged", flag[0], flag[1]));
        }
    }
    Ok(format!("train F1 {train_f1:.3}, LOSO F1 {test_f1:.3} in {secs:.1}s; both ablations ran and changed metrics"))
}

/// Criterion 8: partition, order independence and byte-identical reruns.
pub fn loso_correctness(dir: &Path) -> Check {
    let data = match dir.join("data").join("manifest.csv").exists() {
        true => dir.join("data"),
        false => synth(dir, 1)?,
    };
    let text = std::fs::read_to_string(data.join("manifest.csv")).unwrap();
    let rows: Vec<(String, String)> = text
        .lines()
        .skip(1)
        .map(|l| {
            let mut it = l.split(',');
            (it.next().unwrap().to_string(), it.next().unwrap().to_string())
        })
        .collect();
    let folds = loso_split(rows.iter().map(|(a, b)| (a.as_str(), b.as_str()))).map_err(fail)?;
    let mut covered = std::collections::BTreeSet::new();
    for f in &folds {
        if f.train_ids.iter().any(|i| f.test_ids.contains(i)) {
            return Err(format!("fold {} overlaps", f.index));
        }
        if f.train_ids.len() + f.test_ids.len() != rows.len() {
            return Err(format!("fold {} misses samples", f.index));
        }
        covered.extend(f.test_ids.iter().cloned());
    }
    if covered.len() != rows.len() {
        return Err("test folds do not cover the dataset".into());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(51);
    for _ in 0..100 {
        let pairs: Vec<(Vec<u8>, Vec<u8>)> = (0..rng.gen_range(1..40))
            .map(|_| ((0..3).map(|_| rng.gen_range(0..2)).collect(), (0..3).map(|_| rng.gen_range(0..2)).collect()))
            .collect();
        let mut a = MetricAccumulator::new(vec![1, 2, 4]);
        pairs.iter().for_each(|(t, p)| a.add(t, p));
        let mut shuffled = pairs.clone();
        shuffled.shuffle(&mut rng);
        let mid = shuffled.len() / 2;
        let (mut x, mut y) = (MetricAccumulator::new(vec![1, 2, 4]), MetricAccumulator::new(vec![1, 2, 4]));
        shuffled[..mid].iter().for_each(|(t, p)| x.add(t, p));
        shuffled[mid..].iter().for_each(|(t, p)| y.add(t, p));
        y.merge(&x);
        if a.f1_and_acc().map_err(fail)? != y.f1_and_acc().map_err(fail)? {
            return Err("metric accumulation depends on order".into());
        }
    }

    let first = match dir.join("base").join("synthetic").join("metrics.json") {
        p if p.exists() => p,
        _ => train(&data, &dir.join("base"), &[])?,
    };
    let second = train(&data, &dir.join("rerun"), &[])?;
    if std::fs::read(&first).unwrap() != std::fs::read(&second).unwrap() {
        return Err("two seeded runs wrote different metrics files".into());
    }
    Ok(format!("{} folds partition {} samples; order-independent; reruns byte-identical", folds.len(), rows.len()))
}

/// Criterion 9: zero-shot MER through the CLI plus the classify properties.
pub fn mer_consistency(dir: &Path) -> Check {
    let data = match dir.join("data").join("manifest.csv").exists() {
        true => dir.join("data"),
        false => synth(dir, 1)?,
    };
    if !dir.join("base").join("checkpoints").exists() {
        train(&data, &dir.join("base"), &[])?;
    }
    let manifest = data.join("manifest.csv");
    let mut f1s = Vec::new();
    for fold in ["fold00", "fold01"] {
        let ckpt = dir.join("base").join("checkpoints").join("synthetic").join(fold).join("epoch_300.ckpt");
        let out = dir.join("mer").join(fold);
        let r = microau(&["mer", "--checkpoint", p(&ckpt), "--manifest", p(&manifest), "--out", p(&out)]);
        if r.code != 0 {
            return Err(format!("mer exited {}: {}", r.code, r.stderr));
        }
        let m = read_json(&out.join("mer.json"));
        if m["metrics"]["per_class"].as_array().map(Vec::len) != Some(3) {
            return Err("expected 3 per-class rows".into());
        }
        f1s.push(m["metrics"]["macro_f1"].as_f64().unwrap());
    }
    if f1s.iter().any(|f| *f != 1.0) {
        return Err(format!("macro F1 per held-out subject {f1s:?}"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(61);
    for case in 0..ORACLE_CASES {
        let r = rng.gen_range(2..8);
        let scores: Vec<f64> = (0..r).map(|_| (rng.gen_range(-4..5) as f64) * 0.5).collect();
        let k = classify_emotion(&scores);
        let best = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let first = scores.iter().position(|s| *s == best).unwrap();
        if k != first {
            return Err(format!("case {case}: tie-break picked {k}, expected {first} for {scores:?}"));
        }
        let (a, b) = (rng.gen_range(0.1..10.0), rng.gen_range(-5.0..5.0));
        let moved: Vec<f64> = scores.iter().map(|s| a * s + b).collect();
        let cubed: Vec<f64> = scores.iter().map(|s| s * s * s).collect();
        if classify_emotion(&moved) != k || classify_emotion(&cubed) != k {
            return Err(format!("case {case}: argmax changed under a monotone map"));
        }
    }
    Ok(format!("macro F1 {f1s:?} on both held-out subjects; tie-break and monotone invariance over {ORACLE_CASES} vectors"))
}
