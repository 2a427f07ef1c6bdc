//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Set `PBARL_ACCEPTANCE_OUT` to keep the run directory.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use pbarl::config::{ExperimentConfig, Method};
use pbarl::env::{PrefCostVector, UserType, ACTION_DIM, STATE_DIM};
use pbarl::experiment::{file_hash, run_experiment, ExperimentReport, Run};
use pbarl::gradsuite::run_gradient_suite;
use pbarl::nn::gaussian::traced_kl_standard_normal;
use pbarl::nn::{GaussianDist, Tape, Tensor};
use pbarl::pbarl::{infonce_pref_loss, rank_by_scores, recon_hinge_loss, rerank_by_reward, train_pbarl, wrap_policy};
use pbarl::policy::{load_transitions, rollout, ActMode};
use pbarl::pref::{bt_from_returns, bt_probability, pref_ce_loss, scripted_teacher_label, PrefTrajectory, RewardModel};
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Suite {
    results: Vec<(String, bool)>,
}

impl Suite {
    fn check(&mut self, name: &str, passed: bool, detail: String) {
        println!("[{}] {name}: {detail}", if passed { "PASS" } else { "FAIL" });
        self.results.push((name.to_string(), passed));
    }

    fn error(&mut self, name: &str, e: impl std::fmt::Display) {
        self.check(name, false, format!("error: {e}"));
    }
}

fn proptest<S: Strategy>(cases: u32, strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Result<(), String> {
    let mut runner = TestRunner::new(PropConfig { cases, failure_persistence: None, ..PropConfig::default() });
    runner.run(&strategy, test).map_err(|e| e.to_string())
}

fn gradient_suite(s: &mut Suite) {
    match run_gradient_suite(100, 0) {
        Ok(r) => {
            let worst = r.checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
            let ok = r.passed && r.flat_region_max_grad == 0.0 && r.elapsed < Duration::from_secs(60);
            let names: Vec<&str> = r.checks.iter().map(|c| c.name).collect();
            s.check(
                "gradient suite",
                ok,
                format!(
                    "{} losses x 100 points ({}), max rel err {worst:.2e} < 1e-4, flat-region |grad| {}, {:.1} s < 60 s",
                    r.checks.len(),
                    names.join(", "),
                    r.flat_region_max_grad,
                    r.elapsed.as_secs_f64()
                ),
            );
        }
        Err(e) => s.error("gradient suite", e),
    }
}

fn traj(costs: &[[f64; 6]]) -> PrefTrajectory {
    PrefTrajectory {
        states: vec![vec![0.1; STATE_DIM]; costs.len()],
        actions: vec![vec![0.2; ACTION_DIM]; costs.len()],
        costs: costs.iter().map(|c| PrefCostVector(*c)).collect(),
    }
}

fn closed_forms(s: &mut Suite) {
    let mut notes = Vec::new();
    let mut ok = true;

    let model = RewardModel::new(&[16, 16], &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let t = traj(&[[0.3, 0.1, 0.0, 0.0, 0.2, 0.0], [0.1, 0.2, 0.1, 0.0, 0.0, 0.0]]);
    let p_model = bt_probability(&model, &t, &t).unwrap();
    let p_sym = [-3.7, 0.0, 12.5].map(|v| bt_from_returns(v, v));
    ok &= p_model == 0.5 && p_sym.iter().all(|&p| p == 0.5);
    notes.push(format!("BT(σ,σ)={p_model}"));

    let ce = pref_ce_loss(0.5, 0.5);
    let ce_err = (ce - std::f64::consts::LN_2).abs();
    ok &= ce_err <= 1e-12;
    notes.push(format!("|CE(0.5,0.5)-ln2|={ce_err:.1e}"));

    let eps = 1.0;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut hinge_err: f64 = 0.0;
    for _ in 0..1000 {
        let a: Vec<f64> = (0..ACTION_DIM).map(|_| rand::Rng::random_range(&mut rng, -3.0..3.0)).collect();
        let b: Vec<f64> = (0..ACTION_DIM).map(|_| rand::Rng::random_range(&mut rng, -3.0..3.0)).collect();
        let d: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum();
        let l = recon_hinge_loss(&[a], &[b], eps).unwrap();
        hinge_err = hinge_err.max((l - d.max(eps)).abs());
    }
    ok &= hinge_err <= 1e-12;
    notes.push(format!("max|hinge-max(d,ε)|={hinge_err:.1e}"));

    let list = vec![vec![0.0, 0.0], vec![1.0, 0.0]];
    let nce = infonce_pref_loss(&list, &list, 1.0).unwrap();
    ok &= (nce + 1.0).abs() <= 1e-9;
    notes.push(format!("InfoNCE n=2 = {nce}"));

    let kl_plain = GaussianDist::standard(3).kl_to_standard_normal();
    let tape = Tape::new();
    let zeros = || Tensor::from_vec(2, 3, vec![0.0; 6]).unwrap();
    let kl_traced = traced_kl_standard_normal(tape.constant(zeros()), tape.constant(zeros()))
        .unwrap()
        .mean()
        .item()
        .unwrap();
    ok &= kl_plain == 0.0 && kl_traced == 0.0;
    notes.push(format!("KL(N(0,1)||N(0,1))={kl_plain}/{kl_traced}"));
    s.check("closed-form oracles", ok, notes.join(", "));
}

fn arb_costs() -> impl Strategy<Value = Vec<[f64; 6]>> {
    prop::collection::vec(prop::array::uniform6(0.0f64..2.0), 1..12)
}

fn invariances(s: &mut Suite) {
    let omega = UserType::Cautious.weights();
    let antisym = proptest(512, (arb_costs(), arb_costs(), 0.0f64..2.0), |(a, b, tie)| {
        let (a, b) = (traj(&a), traj(&b));
        let y = scripted_teacher_label(&a, &b, &omega, tie).unwrap();
        let y_swapped = scripted_teacher_label(&b, &a, &omega, tie).unwrap();
        prop_assert_eq!(y, 1.0 - y_swapped);
        Ok(())
    });
    let scaling = proptest(512, (arb_costs(), arb_costs(), 0.01f64..100.0), |(a, b, c)| {
        let (a, b) = (traj(&a), traj(&b));
        let scaled: Vec<f64> = omega.iter().map(|w| c * w).collect();
        let y = scripted_teacher_label(&a, &b, &omega, 0.0).unwrap();
        let y_scaled = scripted_teacher_label(&a, &b, &scaled, 0.0).unwrap();
        prop_assert_eq!(y, y_scaled);
        Ok(())
    });
    let lists = (2usize..9).prop_flat_map(|n| {
        (
            prop::collection::vec(prop::collection::vec(-3.0f64..3.0, ACTION_DIM), n),
            prop::collection::vec(prop::collection::vec(-3.0f64..3.0, ACTION_DIM), n),
            Just((0..n).collect::<Vec<usize>>()).prop_shuffle(),
            0.1f64..2.0,
        )
    });
    let nce = proptest(512, lists, |(ap, ar, perm, tau)| {
        let base = infonce_pref_loss(&ap, &ar, tau).unwrap();
        let pap: Vec<Vec<f64>> = perm.iter().map(|&i| ap[i].clone()).collect();
        let par: Vec<Vec<f64>> = perm.iter().map(|&i| ar[i].clone()).collect();
        let permuted = infonce_pref_loss(&pap, &par, tau).unwrap();
        prop_assert!((base - permuted).abs() <= 1e-9 * (1.0 + base.abs()), "{} vs {}", base, permuted);
        Ok(())
    });
    let model = RewardModel::new(&[16], &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let rerank_lists = (
        prop::collection::vec(-1.0f64..1.0, STATE_DIM),
        prop::collection::vec(prop::collection::vec(-3.0f64..3.0, ACTION_DIM), 1..12),
    );
    let rerank = proptest(512, rerank_lists, |(state, list)| {
        let out = rerank_by_reward(&model, &state, &list).unwrap();
        let key = |v: &Vec<Vec<f64>>| {
            let mut k: Vec<Vec<u64>> = v.iter().map(|a| a.iter().map(|x| x.to_bits()).collect()).collect();
            k.sort();
            k
        };
        prop_assert_eq!(key(&out), key(&list));
        let scores: Vec<f64> = out.iter().map(|a| model.predict(&state, a).unwrap()).collect();
        prop_assert!(scores.windows(2).all(|w| w[0] >= w[1]));
        prop_assert_eq!(rank_by_scores(&vec![0.25; list.len()]), (0..list.len()).collect::<Vec<_>>());
        Ok(())
    });
    let repro = reproducibility();
    let parts = [
        ("teacher antisymmetry", antisym),
        ("ω-scaling labels", scaling),
        ("InfoNCE joint permutation", nce),
        ("rerank multiset", rerank),
        ("seeded stage reproducibility", repro),
    ];
    let ok = parts.iter().all(|(_, r)| r.is_ok());
    let detail: Vec<String> = parts
        .iter()
        .map(|(n, r)| match r {
            Ok(()) => format!("{n} ok"),
            Err(e) => format!("{n} FAILED ({e})"),
        })
        .collect();
    s.check("invariance suite", ok, detail.join(", "));
}

fn tiny_config(out: &Path) -> ExperimentConfig {
    let text = r#"
        id = "repro"
        seeds = [4]
        users = ["cautious"]
        methods = ["pretrained", "pbarl", "preft", "scratch"]
        ablation_n = [1]
        [pretrain]
        env_step_budget = 5000
        hidden = [16]
        [prefs]
        num_queries = 40
        holdout_queries = 20
        [reward]
        hidden = [16]
        epochs = 5
        [transitions]
        episodes = 5
        [pbarl]
        steps = 50
        hidden = 16
        [finetune]
        env_step_budget = 1000
        hidden = [16]
        [eval]
        episodes = 10
    "#;
    let mut c = ExperimentConfig::resolve(Some(text), &[]).unwrap();
    c.out_dir = out.to_path_buf();
    c
}

/// Two independent runs of every stage produce byte-identical artifacts and reports.
fn reproducibility() -> Result<(), String> {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (ra, rep_a) = run_experiment(tiny_config(a.path())).map_err(|e| e.to_string())?;
    let (rb, rep_b) = run_experiment(tiny_config(b.path())).map_err(|e| e.to_string())?;
    let outputs = |r: &Run| {
        let mut v: Vec<(String, String, String)> = r
            .manifest()
            .entries
            .iter()
            .flat_map(|e| e.outputs.iter().map(move |(p, h)| (e.stage.clone(), p.clone(), h.clone())))
            .collect();
        v.sort();
        v
    };
    let (oa, ob) = (outputs(&ra), outputs(&rb));
    if oa.len() < 10 {
        return Err(format!("only {} outputs recorded", oa.len()));
    }
    if oa != ob {
        return Err("artifact hashes differ between runs".into());
    }
    if rep_a != rep_b {
        return Err("reports differ between runs".into());
    }
    Ok(())
}

fn end_to_end(s: &mut Suite, out: &Path) -> Option<(Run, ExperimentReport)> {
    let mut cfg = ExperimentConfig::resolve(None, &[]).unwrap();
    cfg.out_dir = out.to_path_buf();
    let start = Instant::now();
    let (run, report) = match run_experiment(cfg) {
        Ok(r) => r,
        Err(e) => {
            s.error("reward-model fidelity", &e);
            s.error("end-to-end trend", &e);
            return None;
        }
    };
    let elapsed = start.elapsed();
    print!("{}", report.to_table());

    let mut ok = true;
    let mut notes = Vec::new();
    for a in &report.reward_accuracy {
        let acc = a.holdout_accuracy.unwrap_or(0.0);
        let secs: f64 = run
            .manifest()
            .entries
            .iter()
            .filter(|e| e.seed == a.seed && (e.stage == "gen-prefs" || e.stage == "train-reward"))
            .map(|e| e.seconds)
            .sum();
        ok &= acc >= 0.85 && secs < 300.0;
        notes.push(format!("seed{} {acc:.3} in {secs:.0} s", a.seed));
    }
    s.check(
        "reward-model fidelity",
        ok,
        format!("held-out accuracy >= 0.85 within 300 s, feeding/cautious, 500 queries: {}", notes.join(", ")),
    );

    let row = |m: &str| report.row("feeding", "cautious", m).expect("row present");
    let (pre, pb, pf, sc) = (row("pretrained"), row("pbarl"), row("preft"), row("scratch"));
    let need = pre.pref_return + 0.1 * pre.pref_return.abs();
    let a = pb.pref_return >= need;
    let drop_pb = pre.success_rate - pb.success_rate;
    let drop_pf = pre.success_rate - pf.success_rate;
    let b = drop_pb <= 0.10;
    let c = drop_pf >= drop_pb;
    let d = sc.success_rate <= 0.5 * pre.success_rate;
    let t = elapsed <= Duration::from_secs(30 * 60);
    s.check(
        "end-to-end trend",
        a && b && c && d && t,
        format!(
            "(a) return {:.2} vs pre {:.2}, need >= {need:.2} [{}]; (b) PbARL drop {:+.1} pts <= 10 [{}]; \
             (c) PrefFT drop {:+.1} >= PbARL drop {:+.1} [{}]; (d) scratch {:.1}% <= 50% of {:.1}% [{}]; \
             {:.0} s <= 1800 s [{}]",
            pb.pref_return,
            pre.pref_return,
            ok_str(a),
            100.0 * drop_pb,
            ok_str(b),
            100.0 * drop_pf,
            100.0 * drop_pb,
            ok_str(c),
            100.0 * sc.success_rate,
            100.0 * pre.success_rate,
            ok_str(d),
            elapsed.as_secs_f64(),
            ok_str(t)
        ),
    );
    Some((run, report))
}

fn ok_str(b: bool) -> &'static str {
    if b {
        "ok"
    } else {
        "FAIL"
    }
}

fn frozen_contracts(s: &mut Suite, run: &Run) {
    let cell = run.cells()[0].clone();
    let p = run.paths(&cell);
    let result = (|| -> pbarl::Result<(bool, String)> {
        let pretrain_entry = run.manifest().entries.iter().find(|e| e.stage == "pretrain" && e.seed == cell.seed);
        let recorded = pretrain_entry.and_then(|e| e.outputs.iter().find(|(k, _)| k.ends_with("pretrained.ckpt")));
        let file_pre_before = file_hash(&p.pretrained)?;
        let file_rm_before = file_hash(&p.reward)?;
        let pre = run.load_pretrained(&cell)?;
        let rm = run.load_reward(&cell)?;
        let (pre_hash, rm_hash) = (pre.content_hash(), rm.content_hash());
        let transitions = load_transitions(&p.transitions)?;
        let cfg = pbarl::pbarl::PbarlConfig { steps: 300, ..run.cfg.pbarl.clone() };
        let out = train_pbarl(&transitions, &rm, &cfg, 1)?;
        let env = run.env(cell.preset)?;
        let wrapped = wrap_policy(&pre, &out.cvae, env.action_bound);
        for seed in 0..5 {
            rollout(&env, &wrapped, seed, ActMode::Mean)?;
        }
        let same_mem = pre.content_hash() == pre_hash && rm.content_hash() == rm_hash;
        let same_wrapped = wrapped.policy == pre && wrapped.policy.content_hash() == pre_hash;
        let same_disk = file_hash(&p.pretrained)? == file_pre_before && file_hash(&p.reward)? == file_rm_before;
        let since_pretrain = recorded.is_some_and(|(_, h)| *h == file_pre_before);
        Ok((
            same_mem && same_wrapped && same_disk && since_pretrain,
            format!(
                "π^p {}.. and R̂ {}.. unchanged by train_pbarl [{}]; wrapped policy equals π^p [{}]; \
                 files unchanged [{}]; π^p file matches its pretrain-stage hash after all stages [{}]",
                &pre_hash[..12],
                &rm_hash[..12],
                ok_str(same_mem),
                ok_str(same_wrapped),
                ok_str(same_disk),
                ok_str(since_pretrain)
            ),
        ))
    })();
    match result {
        Ok((ok, detail)) => s.check("frozen policy and reward", ok, detail),
        Err(e) => s.error("frozen policy and reward", e),
    }
}

fn n_ablation(s: &mut Suite, run: &Run, out: &Path) {
    let cell = run.cells()[0].clone();
    let p = run.paths(&cell);
    let mut cfg = run.cfg.clone();
    cfg.id = "ablation".into();
    cfg.out_dir = out.to_path_buf();
    cfg.seeds = vec![cell.seed];
    cfg.methods = vec![Method::Pretrained];
    cfg.ablation_n = vec![1, 10, 20];
    cfg.pbarl.steps = 4000;
    cfg.artifacts.pretrained = Some(p.pretrained.clone());
    cfg.artifacts.preferences = Some(p.prefs.clone());
    cfg.artifacts.reward_model = Some(p.reward.clone());
    cfg.artifacts.transitions = Some(p.transitions.clone());
    let result = run_experiment(cfg).and_then(|(r, report)| {
        let rec = std::fs::read_to_string(r.paths(&r.cells()[0]).pbarl_record(Some(1))).map_err(|e| pbarl::Error::io(Path::new("record"), e))?;
        let rec: serde_json::Value = serde_json::from_str(&rec).expect("record is json");
        let pref_zero = rec["components"].as_array().is_some_and(|c| !c.is_empty() && c.iter().all(|x| x["pref"] == 0.0));
        Ok((report, pref_zero))
    });
    match result {
        Ok((report, pref_zero)) => {
            let rows: Vec<String> = [1, 10, 20]
                .iter()
                .filter_map(|n| report.row("feeding", "cautious", &format!("pbarl-n{n}")))
                .map(|r| format!("{} succ {:.1}% return {:.2}", r.method, 100.0 * r.success_rate, r.pref_return))
                .collect();
            s.check(
                "n-ablation",
                rows.len() == 3 && pref_zero,
                format!("{} (4000 steps, seed-{} artifacts); n=1 preference loss identically 0 [{}]", rows.join("; "), cell.seed, ok_str(pref_zero)),
            );
        }
        Err(e) => s.error("n-ablation", e),
    }
}

fn main() {
    let keep = std::env::var_os("PBARL_ACCEPTANCE_OUT").map(PathBuf::from);
    let tmp = tempfile::tempdir().expect("tempdir");
    let out = keep.clone().unwrap_or_else(|| tmp.path().to_path_buf());
    let mut s = Suite { results: Vec::new() };
    let started = Instant::now();

    gradient_suite(&mut s);
    closed_forms(&mut s);
    invariances(&mut s);
    match end_to_end(&mut s, &out.join("e2e")) {
        Some((run, _)) => {
            frozen_contracts(&mut s, &run);
            n_ablation(&mut s, &run, &out.join("ablation"));
        }
        None => {
            s.error("frozen policy and reward", "end-to-end run failed");
            s.error("n-ablation", "end-to-end run failed");
        }
    }

    let passed = s.results.iter().filter(|(_, ok)| *ok).count();
    println!(
        "acceptance: {passed}/{} criteria passed in {:.0} s",
        s.results.len(),
        started.elapsed().as_secs_f64()
    );
    if passed != s.results.len() {
        std::process::exit(1);
    }
}
