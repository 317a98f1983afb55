//! Acceptance criteria. Each test prints one `criterion N: PASS|FAIL` line
//! before asserting. Run with `--nocapture` to see them.
//!
//! Criteria 7-9 share one desk-scale training run (built on first use).

use std::path::Path;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use basetx_core::basetx::{
    attend, base_adapted_prototype, compose_prototype, head_param, project_qkv, BaseTransformer, NormMode, Reduce,
    TransformerConfig,
};
use basetx_core::encoder::{global_pool, Encoder, EncoderConfig, FeatureMap, FrozenEncoder, Mode, Provenance};
use basetx_core::episodes::{synth_dataset, Split, SplitDataset, SynthConfig};
use basetx_core::evalrig::{evaluate, mean_ci95, EvalConfig, EvalModel, EvalReport, FeatureCache, Method};
use basetx_core::losses::{cross_entropy, cross_entropy_value, info_nce, info_nce_value, pretrain_loss};
use basetx_core::membank::{build_bank, MemoryBank};
use basetx_core::ndkernel::{checkpoint, gradcheck, Bound, Dtype, Tape, Tensor, Var};
use basetx_core::query::{OraclePrototypes, QueryMode, SemanticSource};
use basetx_core::trainer::{meta_train, oracle_prototypes, pretrain, MetaConfig, MetaInputs, MetaModel, PretrainConfig};
use basetx_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn verdict(n: usize, name: &str, pass: bool, detail: &str) {
    println!("criterion {n}: {} {name} ({detail})", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {n} ({name}) failed: {detail}");
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn map(t: Tensor) -> FeatureMap {
    FeatureMap {
        tensor: t,
        provenance: Provenance::FrozenPhi0,
    }
}

// ----- 1: full-pipeline gradient oracle --------------------------------------

#[test]
fn c01_full_pipeline_gradient() {
    let start = Instant::now();
    let enc_cfg = EncoderConfig {
        channels: 4,
        ..EncoderConfig::default()
    };
    assert_eq!(enc_cfg.output_spatial(), 2);
    let (way, queries, k, heads) = (2, 2, 3, 2);
    let mut worst = 0.0f64;
    let mut checked = 0;
    for seed in 0..20u64 {
        let mut r = rng(seed);
        let encoder = Encoder::new(enc_cfg.clone(), &mut r).unwrap();
        let bt = BaseTransformer::new(4, TransformerConfig { heads, ..Default::default() }, &mut r).unwrap();
        let enc_names: Vec<String> = encoder.params().names().map(str::to_string).collect();
        let tx_names: Vec<String> = bt.heads.params().names().map(str::to_string).collect();
        let mut inputs: Vec<Tensor> = enc_names.iter().map(|n| encoder.params().get(n).unwrap().clone()).collect();
        inputs.extend(tx_names.iter().map(|n| bt.heads.params().get(n).unwrap().clone()));

        // supports, queries and two views of each support in one batch
        let n_img = way + way * queries + 2 * way;
        let images = Tensor::uniform(vec![n_img, 3, 32, 32], 0.0, 1.0, &mut r);
        let bases = Tensor::randn(vec![way, k, 4, 2, 2], 1.0, &mut r);
        let labels: Vec<usize> = (0..way * queries).map(|i| i / queries).collect();
        let names: Vec<String> = enc_names.iter().chain(&tx_names).cloned().collect();

        let f = |tape: &Tape, vars: &[Var]| -> basetx_core::Result<Var> {
            let bound: Bound = names.iter().cloned().zip(vars.iter().copied()).collect();
            let x = tape.constant(images.clone());
            let (feat, _) = encoder.forward(tape, &bound, x, Mode::Train)?;
            let sup = tape.index_select(feat, &(0..way).collect::<Vec<_>>())?;
            let qry = tape.index_select(feat, &(way..way + way * queries).collect::<Vec<_>>())?;
            let adapted = bt.adapt(tape, &bound, sup, tape.constant(bases.clone()))?;
            let logits = bt.logits(tape, &bound, qry, adapted.prototypes, 0.1)?;
            let ce = cross_entropy(tape, logits, &labels)?;
            let o = way + way * queries;
            let va = global_pool(tape, tape.index_select(feat, &(o..o + way).collect::<Vec<_>>())?)?;
            let vb = global_pool(tape, tape.index_select(feat, &(o + way..o + 2 * way).collect::<Vec<_>>())?)?;
            let nce = info_nce(tape, va, vb, true)?;
            Ok(pretrain_loss(tape, ce, nce, 0.1)?.0)
        };
        // Probes of exactly-zero gradients (conv biases feeding batch
        // statistics) only see rounding noise, so the relative-error floor is
        // tied to the largest gradient entry.
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let loss = f(&tape, &vars).unwrap();
        let grads = tape.backward(loss).unwrap();
        let gmax = vars
            .iter()
            .flat_map(|v| grads.get(*v).unwrap().data().to_vec())
            .fold(0.0f64, |m, g| m.max(g.abs()));
        let report = gradcheck::check(&inputs, f, 1e-5, 1e-4 * gmax.max(1.0), Some(6)).unwrap();
        worst = worst.max(report.max_rel_error);
        checked += report.checked;
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        1,
        "full-pipeline gradient vs central differences",
        worst < 1e-4 && secs < 60.0 && checked > 0,
        &format!("max rel error {worst:.2e} over {checked} coordinates, 20 seeds, {secs:.1}s"),
    );
}

// ----- 2: attention oracle ---------------------------------------------------

/// Triple-loop reference: scores, softmax and residual composition.
fn naive_prototype(q: &[Vec<f64>], keys: &[Vec<Vec<f64>>], values: &[Vec<Vec<f64>>], mode: NormMode) -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
    let (m, k, n, d) = (q.len(), keys.len(), keys[0].len(), q[0].len());
    let mut s = vec![vec![vec![0.0; n]; k]; m];
    for mi in 0..m {
        for j in 0..k {
            for ni in 0..n {
                s[mi][j][ni] = (0..d).map(|c| q[mi][c] * keys[j][ni][c]).sum();
            }
        }
    }
    let softmax = |cells: Vec<(usize, usize, usize)>, s: &mut Vec<Vec<Vec<f64>>>| {
        let mx = cells.iter().map(|&(a, b, c)| s[a][b][c]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = cells.iter().map(|&(a, b, c)| (s[a][b][c] - mx).exp()).sum();
        for (a, b, c) in cells {
            s[a][b][c] = (s[a][b][c] - mx).exp() / z;
        }
    };
    match mode {
        NormMode::PerQuery => {
            for mi in 0..m {
                let cells = (0..k).flat_map(|j| (0..n).map(move |ni| (mi, j, ni))).collect();
                softmax(cells, &mut s);
            }
        }
        NormMode::LiteralMjn => {
            let cells = (0..m).flat_map(|mi| (0..k).flat_map(move |j| (0..n).map(move |ni| (mi, j, ni)))).collect();
            softmax(cells, &mut s);
        }
    }
    let mut p = q.to_vec();
    for mi in 0..m {
        for j in 0..k {
            for ni in 0..n {
                for c in 0..d {
                    p[mi][c] += s[mi][j][ni] * values[j][ni][c];
                }
            }
        }
    }
    (p, s)
}

fn rows(t: &Tensor, r: usize, c: usize) -> Vec<Vec<f64>> {
    t.data().chunks(c).take(r).map(<[f64]>::to_vec).collect()
}

#[test]
fn c02_attention_matches_naive_loops() {
    let mut max_err = 0.0f64;
    let mut max_norm = 0.0f64;
    let mut shapes = 0;
    let mut r = rng(2);
    for m in 1..=4 {
        for k in 1..=4 {
            for n in 1..=4 {
                for d in 1..=4 {
                    for mode in [NormMode::PerQuery, NormMode::LiteralMjn] {
                        let q = Tensor::randn(vec![m, d], 1.0, &mut r);
                        let keys = Tensor::randn(vec![k, n, d], 1.0, &mut r);
                        let values = Tensor::randn(vec![k, n, d], 1.0, &mut r);
                        let attn = attend(&q, &keys, mode, false).unwrap();
                        let p = compose_prototype(&q, &attn, &values).unwrap();
                        let kv = |t: &Tensor| -> Vec<Vec<Vec<f64>>> {
                            (0..k).map(|j| rows(&t.slice0(j), n, d)).collect()
                        };
                        let (p_ref, s_ref) = naive_prototype(&rows(&q, m, d), &kv(&keys), &kv(&values), mode);
                        for mi in 0..m {
                            for c in 0..d {
                                max_err = max_err.max((p.get(&[mi, c]) - p_ref[mi][c]).abs());
                            }
                            for j in 0..k {
                                for ni in 0..n {
                                    max_err = max_err.max((attn.scores.get(&[mi, j, ni]) - s_ref[mi][j][ni]).abs());
                                }
                            }
                        }
                        max_norm = max_norm.max(attn.normalization_error());
                        shapes += 1;
                    }
                }
            }
        }
    }
    verdict(
        2,
        "attend + compose vs triple loop",
        max_err < 1e-12 && max_norm < 1e-6,
        &format!("{shapes} shape/mode cases, max abs error {max_err:.2e}, max normalization error {max_norm:.2e}"),
    );
}

// ----- 3: residual and permutation invariants ---------------------------------

#[test]
fn c03_residual_and_permutation() {
    let mut r = rng(3);
    let mut residual_exact = true;
    let mut max_perm = 0.0f64;
    for trial in 0..50 {
        let c = 4 * (1 + trial % 3);
        let heads = [1, 2, 4][trial % 3];
        let support = map(Tensor::randn(vec![c, 2, 2], 1.0, &mut r));
        let k = 1 + trial % 6;
        let bases: Vec<FeatureMap> = (0..k).map(|_| map(Tensor::randn(vec![c, 2, 2], 1.0, &mut r))).collect();
        let mut bt = BaseTransformer::new(c, TransformerConfig { heads, ..Default::default() }, &mut r).unwrap();

        let (p, _) = base_adapted_prototype(&support, &bases, &bt, 0).unwrap();
        let mut perm: Vec<usize> = (0..k).collect();
        for i in (1..k).rev() {
            perm.swap(i, r.gen_range(0..=i));
        }
        let shuffled: Vec<FeatureMap> = perm.iter().map(|&i| bases[i].clone()).collect();
        let (pp, _) = base_adapted_prototype(&support, &shuffled, &bt, 0).unwrap();
        max_perm = max_perm.max(p.p.max_abs_diff(&pp.p));

        bt.heads.zero('v');
        let (p0, _) = base_adapted_prototype(&support, &bases, &bt, 0).unwrap();
        let (q, _, _) = project_qkv(&support, &bases, &bt.heads).unwrap();
        residual_exact &= p0.p.data() == q.data();
    }
    verdict(
        3,
        "V = 0 gives P = q exactly; base permutation invariance",
        residual_exact && max_perm < 1e-10,
        &format!("residual exact: {residual_exact}, max permutation change {max_perm:.2e}"),
    );
}

// ----- 4: exclusion soundness ------------------------------------------------

#[test]
fn c04_no_same_class_fetches() {
    let synth = SynthConfig {
        images_per_class: 8,
        image_size: 16,
        ..SynthConfig::default()
    };
    let out = synth_dataset(&synth).unwrap();
    let ds = &out.dataset;
    let enc_cfg = EncoderConfig {
        input_size: 16,
        channels: 4,
        ..EncoderConfig::default()
    };
    let phi0 = Encoder::new(enc_cfg, &mut rng(4)).unwrap().freeze();
    let bank = build_bank(ds, &phi0, 200, 0).unwrap();
    let semantic = SemanticSource::Matrix(out.similarity.clone());
    let oracle = OraclePrototypes {
        labels: ds.labels(Split::Base),
        prototypes: (0..bank.num_classes()).map(|c| bank.pooled_mean(c).to_vec()).collect(),
    };
    let inputs = MetaInputs {
        dataset: ds,
        phi0: &phi0,
        bank: &bank,
        semantic: Some(&semantic),
        oracle: Some(&oracle),
    };
    let mut episodes = 0;
    let mut fetched = 0;
    let mut same = 0;
    for (mode, steps) in [(QueryMode::Semantic, 400), (QueryMode::Visual, 300), (QueryMode::Oracle, 300)] {
        let cfg = MetaConfig {
            steps,
            queries: 1,
            balance: 0.0,
            query_mode: mode,
            val_every: 0,
            log_every: 0,
            seed: steps as u64,
            ..MetaConfig::default()
        };
        let audit = meta_train(&inputs, &cfg).unwrap().audit;
        episodes += steps;
        fetched += audit.instances;
        same += audit.same_class;
    }
    verdict(
        4,
        "meta-training bank fetches exclude the support class",
        episodes >= 1000 && fetched > 0 && same == 0,
        &format!("{episodes} episodes, {fetched} fetched instances, {same} same-class"),
    );
}

// ----- 5: loss fixtures ------------------------------------------------------

#[test]
fn c05_loss_fixtures() {
    let mut errs = Vec::new();
    for n in 2..=10 {
        let ce = cross_entropy_value(&Tensor::full(vec![3, n], 0.7), &[0, n - 1, 1]).unwrap();
        errs.push((ce - (n as f64).ln()).abs());
        let feats = Tensor::full(vec![n, 5], 0.3);
        for normalize in [false, true] {
            let nce = info_nce_value(&feats, &feats, normalize).unwrap();
            errs.push((nce - ((2 * n - 1) as f64).ln()).abs());
        }
    }
    let max_err = errs.iter().cloned().fold(0.0, f64::max);

    let mut r = rng(5);
    let mut exact = true;
    for _ in 0..20 {
        let tape = Tape::new();
        let logits = tape.constant(Tensor::randn(vec![6, 4], 3.0, &mut r));
        let ce = cross_entropy(&tape, logits, &[0, 1, 2, 3, 0, 1]).unwrap();
        let a = tape.constant(Tensor::randn(vec![4, 3], 1.0, &mut r));
        let b = tape.constant(Tensor::randn(vec![4, 3], 1.0, &mut r));
        let nce = info_nce(&tape, a, b, true).unwrap();
        let (total, _) = pretrain_loss(&tape, ce, nce, 0.0).unwrap();
        exact &= tape.value(total).data()[0].to_bits() == tape.value(ce).data()[0].to_bits();
    }
    verdict(
        5,
        "CE = ln N, InfoNCE = ln(2N-1), b = 0 gives CE",
        max_err < 1e-12 && exact,
        &format!("max fixture error {max_err:.2e}, b=0 bit-exact: {exact}"),
    );
}

// ----- 6: confidence interval ------------------------------------------------

#[test]
fn c06_ci_formula() {
    let mut r = rng(6);
    let mut max_err = 0.0f64;
    for t in [2usize, 3, 10, 600] {
        let xs: Vec<f64> = (0..t).map(|_| r.gen_range(0.0..1.0)).collect();
        let mean = xs.iter().sum::<f64>() / t as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (t - 1) as f64;
        let closed = 1.96 * var.sqrt() / (t as f64).sqrt();
        let report = EvalReport::from_accuracies(xs.clone(), EvalConfig::default()).unwrap();
        max_err = max_err.max((report.ci95_halfwidth - 100.0 * closed).abs() / 100.0);
        max_err = max_err.max((report.mean_accuracy - 100.0 * mean).abs() / 100.0);
    }
    let fixture = mean_ci95(&[0.6, 0.8]).unwrap();
    let fixture_ok = (fixture.0 - 0.7).abs() < 1e-12 && (fixture.1 - 1.96 * 0.02f64.sqrt() / 2f64.sqrt()).abs() < 1e-12;
    let zero = mean_ci95(&[0.55; 40]).unwrap().1;
    verdict(
        6,
        "ci95 = 1.96 std / sqrt(T)",
        max_err < 1e-12 && fixture_ok && zero == 0.0,
        &format!("max error {max_err:.2e}, fixture ok: {fixture_ok}, zero-variance halfwidth {zero}"),
    );
}

// ----- 10: persistence -------------------------------------------------------

fn file_bytes(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn c10_persistence_and_fingerprint_guard() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let synth = SynthConfig {
        images_per_class: 6,
        image_size: 16,
        n_base: 6,
        ..SynthConfig::default()
    };
    let ds = synth_dataset(&synth).unwrap().dataset;
    let enc_cfg = EncoderConfig {
        input_size: 16,
        channels: 8,
        ..EncoderConfig::default()
    };
    let enc = Encoder::new(enc_cfg.clone(), &mut rng(10)).unwrap();
    enc.save(&d.join("a.btwt")).unwrap();
    let enc2 = Encoder::load(enc_cfg.clone(), &d.join("a.btwt")).unwrap();
    enc2.save(&d.join("b.btwt")).unwrap();
    let enc_ok = enc2 == enc && file_bytes(&d.join("a.btwt")) == file_bytes(&d.join("b.btwt"));

    let phi0 = enc.clone().freeze();
    let bank = build_bank(&ds, &phi0, 200, 0).unwrap();
    bank.save(&d.join("bank.btwt")).unwrap();
    let bank2 = MemoryBank::load(&d.join("bank.btwt"), Some(&phi0)).unwrap();
    bank2.save(&d.join("bank2.btwt")).unwrap();
    let bank_ok = bank2.digest() == bank.digest() && file_bytes(&d.join("bank.btwt")) == file_bytes(&d.join("bank2.btwt"));

    let model = MetaModel {
        encoder: enc.clone(),
        transformer: BaseTransformer::new(8, TransformerConfig { heads: 2, ..Default::default() }, &mut rng(11)).unwrap(),
    };
    model.save(&d.join("m.btwt"), Dtype::F64).unwrap();
    let model2 = MetaModel::load(&d.join("m.btwt"), enc_cfg.clone(), model.transformer.config.clone()).unwrap();
    model2.save(&d.join("m2.btwt"), Dtype::F64).unwrap();
    let model_ok = model2 == model && file_bytes(&d.join("m.btwt")) == file_bytes(&d.join("m2.btwt"));

    let store = checkpoint::load(&d.join("m.btwt")).unwrap();
    let names_ok = store.names().any(|n| n == head_param('q', 1));

    let other = Encoder::new(enc_cfg.clone(), &mut rng(12)).unwrap().freeze();
    let load_rejected = matches!(
        MemoryBank::load(&d.join("bank.btwt"), Some(&other)),
        Err(Error::FingerprintMismatch { .. })
    );
    let inputs = MetaInputs {
        dataset: &ds,
        phi0: &other,
        bank: &bank,
        semantic: None,
        oracle: None,
    };
    let cfg = MetaConfig {
        query_mode: QueryMode::Visual,
        ..MetaConfig::default()
    };
    let train_rejected = matches!(meta_train(&inputs, &cfg), Err(Error::FingerprintMismatch { .. }));
    let reloaded = FrozenEncoder::load(enc_cfg, &d.join("a.btwt")).unwrap();
    let fp_ok = reloaded.fingerprint() == bank.fingerprint();

    verdict(
        10,
        "bit-identical save/load; fingerprint guard",
        enc_ok && bank_ok && model_ok && names_ok && load_rejected && train_rejected && fp_ok,
        &format!(
            "encoder {enc_ok}, bank {bank_ok}, model {model_ok}, head names {names_ok}, \
             mismatched load rejected {load_rejected}, mismatched meta-train rejected {train_rejected}, \
             reloaded fingerprint matches {fp_ok}"
        ),
    );
}

// ----- 7-9: desk-scale replication ------------------------------------------

/// The desk-scale schedule shared by criteria 7-9.
fn desk_synth() -> SynthConfig {
    SynthConfig {
        n_base: 20,
        n_novel: 5,
        image_size: 32,
        ..SynthConfig::default()
    }
}

fn desk_pretrain(balance: f64) -> PretrainConfig {
    PretrainConfig {
        steps: 400,
        batch_size: 64,
        balance,
        val_every: 0,
        ..PretrainConfig::default()
    }
}

fn desk_meta(method: Method) -> MetaConfig {
    MetaConfig {
        steps: 500,
        queries: 5,
        method,
        st_reduce: Reduce::Mean,
        clip_norm: Some(10.0),
        val_every: 0,
        ..MetaConfig::default()
    }
}

fn desk_eval() -> EvalConfig {
    EvalConfig {
        tasks: 600,
        st_reduce: Reduce::Mean,
        protonet_reduce: Reduce::Mean,
        ..EvalConfig::default()
    }
}

struct Desk {
    ds: SplitDataset,
    semantic: SemanticSource,
    oracle: OraclePrototypes,
    plain: FeatureCache,
    simclr: FeatureCache,
    phi0_novel: FeatureCache,
    bank: MemoryBank,
    bt: MetaModel,
    bt_novel: FeatureCache,
    st: MetaModel,
    st_novel: FeatureCache,
    /// Training time attributable to criterion 7's four methods.
    c7_training: Duration,
}

impl Desk {
    fn model(&self, method: Method) -> EvalModel<'_> {
        match method {
            Method::Protonet => EvalModel {
                features: &self.simclr,
                phi0: None,
                transformer: None,
                bank: None,
                semantic: None,
                oracle: None,
            },
            Method::Bt => EvalModel {
                features: &self.bt_novel,
                phi0: Some(&self.phi0_novel),
                transformer: Some(&self.bt.transformer),
                bank: Some(&self.bank),
                semantic: Some(&self.semantic),
                oracle: Some(&self.oracle),
            },
            Method::St => EvalModel {
                features: &self.st_novel,
                phi0: None,
                transformer: Some(&self.st.transformer),
                bank: None,
                semantic: None,
                oracle: None,
            },
        }
    }
}

fn desk() -> &'static Desk {
    static DESK: OnceLock<Desk> = OnceLock::new();
    DESK.get_or_init(|| {
        let start = Instant::now();
        let out = synth_dataset(&desk_synth()).unwrap();
        let ds = out.dataset;
        let semantic = SemanticSource::Matrix(out.similarity);
        let enc_cfg = EncoderConfig::default();
        let plain = pretrain(&ds, &enc_cfg, &desk_pretrain(0.0)).unwrap().encoder;
        let simclr = pretrain(&ds, &enc_cfg, &desk_pretrain(0.1)).unwrap().encoder;
        let phi0 = simclr.freeze();
        let bank = build_bank(&ds, &phi0, 200, 0).unwrap();
        let inputs = MetaInputs {
            dataset: &ds,
            phi0: &phi0,
            bank: &bank,
            semantic: Some(&semantic),
            oracle: None,
        };
        let bt = meta_train(&inputs, &desk_meta(Method::Bt)).unwrap().model;
        let c7_training = start.elapsed();
        let st = meta_train(&inputs, &desk_meta(Method::St)).unwrap().model;
        let oracle = oracle_prototypes(&ds, &enc_cfg, &desk_pretrain(0.1)).unwrap();
        let encode = |e: &Encoder| FeatureCache::encode(&ds, Split::Novel, e).unwrap();
        Desk {
            plain: encode(&plain),
            simclr: FeatureCache::encode_frozen(&ds, Split::Novel, &phi0).unwrap(),
            phi0_novel: FeatureCache::encode_frozen(&ds, Split::Novel, &phi0).unwrap(),
            bt_novel: encode(&bt.encoder),
            st_novel: encode(&st.encoder),
            ds,
            semantic,
            oracle,
            bank,
            bt,
            st,
            c7_training,
        }
    })
}

fn run(desk: &Desk, model: &EvalModel, method: Method, shot: usize, query: QueryMode) -> EvalReport {
    let cfg = EvalConfig {
        method,
        shot,
        query_mode: query,
        ..desk_eval()
    };
    evaluate(&desk.ds, model, &cfg).unwrap()
}

fn fmt(r: &EvalReport) -> String {
    format!("{:.2}±{:.2}", r.mean_accuracy, r.ci95_halfwidth)
}

#[test]
fn c07_directional_replication() {
    let desk = desk();
    let start = Instant::now();
    let bt_sem = run(desk, &desk.model(Method::Bt), Method::Bt, 1, QueryMode::Semantic);
    let bt_vis = run(desk, &desk.model(Method::Bt), Method::Bt, 1, QueryMode::Visual);
    let pn_simclr = run(desk, &desk.model(Method::Protonet), Method::Protonet, 1, QueryMode::Semantic);
    let plain = EvalModel {
        features: &desk.plain,
        ..desk.model(Method::Protonet)
    };
    let pn_plain = run(desk, &plain, Method::Protonet, 1, QueryMode::Semantic);
    let total = desk.c7_training + start.elapsed();
    let gap = |hi: &EvalReport, lo: &EvalReport| {
        hi.mean_accuracy - lo.mean_accuracy >= hi.ci95_halfwidth.max(lo.ci95_halfwidth)
    };
    let ordered = gap(&bt_sem, &bt_vis) && gap(&bt_vis, &pn_simclr) && gap(&pn_simclr, &pn_plain);
    verdict(
        7,
        "BT-semantic > BT-visual > PN-SimCLR > PN-plain (1-shot, 600 tasks)",
        ordered && total < Duration::from_secs(15 * 60),
        &format!(
            "{} / {} / {} / {}, {:.0}s",
            fmt(&bt_sem),
            fmt(&bt_vis),
            fmt(&pn_simclr),
            fmt(&pn_plain),
            total.as_secs_f64()
        ),
    );
}

#[test]
fn c08_shot_gap_shrinks() {
    let desk = desk();
    let mut gaps = Vec::new();
    let mut detail = Vec::new();
    for shot in [1, 5] {
        let bt = run(desk, &desk.model(Method::Bt), Method::Bt, shot, QueryMode::Semantic);
        let st = run(desk, &desk.model(Method::St), Method::St, shot, QueryMode::Semantic);
        gaps.push(bt.mean_accuracy - st.mean_accuracy);
        detail.push(format!("{shot}-shot BT {} ST {}", fmt(&bt), fmt(&st)));
    }
    verdict(
        8,
        "(BT - ST) at 1-shot exceeds (BT - ST) at 5-shot",
        gaps[0] > gaps[1],
        &format!("{}; gaps {:.2} vs {:.2}", detail.join(", "), gaps[0], gaps[1]),
    );
}

#[test]
fn c09_querying_quality() {
    let desk = desk();
    let model = desk.model(Method::Bt);
    let oracle = run(desk, &model, Method::Bt, 1, QueryMode::Oracle);
    let semantic = run(desk, &model, Method::Bt, 1, QueryMode::Semantic);
    let visual = run(desk, &model, Method::Bt, 1, QueryMode::Visual);
    let within = |hi: &EvalReport, lo: &EvalReport| {
        hi.mean_accuracy - lo.mean_accuracy >= -hi.ci95_halfwidth.max(lo.ci95_halfwidth)
    };
    verdict(
        9,
        "oracle >= semantic >= visual within one CI halfwidth",
        within(&oracle, &semantic) && within(&semantic, &visual),
        &format!("{} / {} / {}", fmt(&oracle), fmt(&semantic), fmt(&visual)),
    );
}
