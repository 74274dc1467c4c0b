//! Acceptance suite: one PASS/FAIL line per criterion. Runs without the
//! libtest harness so that the lines appear in order and uncaptured.

use std::path::PathBuf;
use std::process::Command;
use std::time::Instant;

use serde_json::Value;
use styleadapt::checkpoint::load_backbone;
use styleadapt::config::RunConfig;
use styleadapt::pipeline::{param_report, AuxOutcome, Paths};
use styleadapt::report::read_report;
use styleadapt_core::adapters::{count_adapter_params, AdapterBanks, AdapterConfig, UpInit};
use styleadapt_core::auxmodels::{AttributeClassifier, ClassifierConfig};
use styleadapt_core::backbone::{BackboneConfig, BackboneModel};
use styleadapt_core::composition::{inject_adapters, AdaptedModel, CompositionPlan, StackSelection};
use styleadapt_core::corpus::AttributeSchema;
use styleadapt_core::evaluation::g_score;
use styleadapt_core::graph::{Graph, Group};
use styleadapt_core::init::{below, seeded, shuffle, uniform, SeededRng};
use styleadapt_core::tensor::softmax;
use styleadapt_core::training::{policy_gradient_term, reconstruction_graph};

/// Seed of the end-to-end run.
const SEED: u64 = 7;
const STACK: &str = "Stack(Parallel(future,past,present),Parallel(passive,active))";

struct Outcome {
    ok: bool,
    detail: String,
}

fn outcome(ok: bool, detail: impl Into<String>) -> Outcome {
    Outcome { ok, detail: detail.into() }
}

fn main() {
    let mut failures = 0;
    let mut run = |n: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let o = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            outcome(false, format!("panicked: {}", msg.unwrap_or_default()))
        });
        let tag = if o.ok { "PASS" } else { "FAIL" };
        println!("criterion {n:>2} {tag}: {name} ({}) [{:.1}s]", o.detail, t.elapsed().as_secs_f64());
        if !o.ok {
            failures += 1;
        }
    };

    run(1, "parameter count", &mut parameter_count);
    run(2, "G-score oracle", &mut g_score_oracle);
    run(4, "adapter identity at zero", &mut identity_at_zero);
    run(5, "adapter gradient check", &mut gradient_check);
    run(6, "REINFORCE enumeration oracle", &mut reinforce_oracle);
    run(7, "stream isolation", &mut stream_isolation);

    let pipeline = Pipeline::run();
    run(10, "CLI pipeline smoke", &mut || pipeline.smoke());
    run(3, "frozen backbone", &mut || pipeline.frozen_backbone());
    run(8, "end-to-end Parallel transfer", &mut || pipeline.parallel_transfer());
    run(9, "compositional Stack reuse", &mut || pipeline.stack_reuse());

    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}

fn parameter_count() -> Outcome {
    let reference = BackboneConfig::reference_scale();
    let adapter = AdapterConfig::for_backbone(&reference, 64);
    let counted = count_adapter_params(&adapter);
    // down (H_u x H_d) + up (H_d x H_u) + both biases, in each of 24 layers
    let (h_u, h_d, layers) = (1024usize, 64usize, 24usize);
    let expected = layers * (h_u * h_d + h_d + h_d * h_u + h_u);
    let ratio = (counted as f64 / 406_000_000.0 * 10_000.0).round() / 100.0;
    let line = param_report(&RunConfig::with_seed(0), &Paths::new("unused"), true).map(|r| r.line()).unwrap_or_else(|e| e.to_string());
    let want = "trainable 15,859,200 / frozen backbone; 3,171,840 per adapter (0.78% of 406M)";
    let ok = counted == 3_171_840 && counted == expected && ratio == 0.78 && line == want;
    outcome(ok, format!("{counted} per adapter, {ratio}% of 406M, report {line:?}"))
}

/// Every (ACCs, BS, PPL, printed G) row of the automatic-evaluation tables.
fn table_rows() -> Vec<(&'static str, Vec<f64>, f64, f64, f64)> {
    vec![
        ("BackTrans", vec![94.5], 0.88, 11.3, 1.95),
        ("CrossAlign", vec![74.3], 0.89, 35.3, 1.23),
        ("DeleteOnly", vec![87.6], 0.91, 36.4, 1.30),
        ("Del&Retri", vec![90.2], 0.91, 34.0, 1.34),
        ("DualRL", vec![88.9], 0.95, 27.1, 1.46),
        ("Template", vec![83.7], 0.92, 47.2, 1.18),
        ("Unpaired", vec![50.6], 0.91, 53.1, 0.95),
        ("UnsuperMT", vec![96.2], 0.93, 33.5, 1.39),
        ("Style Transformer", vec![85.8], 0.95, 10.1, 2.00),
        ("adapters, sentiment", vec![90.1], 0.91, 8.2, 2.15),
        ("ST tense, tense-voice", vec![91.1], 0.91, 15.3, 1.76),
        ("ST voice, tense-voice", vec![87.2], 0.85, 11.0, 1.89),
        ("adapters, tense-voice", vec![96.9, 81.9], 0.96, 4.7, 2.63),
        ("ST tense, adjadv", vec![92.6], 0.92, 27.0, 1.47),
        ("ST removal, adjadv", vec![83.7], 0.93, 21.7, 1.53),
        ("adapters, adjadv", vec![96.2, 76.5], 0.95, 11.8, 1.91),
        ("ST tense, pp-front-back", vec![95.7], 0.83, 6.8, 2.27),
        ("ST front-back, pp-front-back", vec![57.2], 0.83, 10.4, 1.66),
        ("adapters, pp-front-back", vec![88.2, 48.9], 0.96, 4.0, 2.54),
        ("ST tense, pp-removal", vec![94.9], 0.91, 27.0, 1.47),
        ("ST removal, pp-removal", vec![87.2], 0.91, 26.1, 1.45),
        ("adapters, pp-removal", vec![96.0, 74.5], 0.96, 12.5, 1.87),
        ("sequential ST, tense-voice", vec![80.2, 88.1], 0.85, 22.2, 1.48),
        ("stacked adapters, tense-voice", vec![88.2, 85.4], 0.90, 8.0, 2.14),
        ("sequential ST, adjadv", vec![88.6, 90.0], 0.89, 42.2, 1.23),
        ("stacked adapters, adjadv", vec![88.9, 92.7], 0.86, 22.0, 1.53),
        ("sequential ST, pp-front-back", vec![76.1, 65.7], 0.82, 8.1, 1.93),
        ("stacked adapters, pp-front-back", vec![88.2, 50.0], 0.92, 4.9, 2.35),
        ("sequential ST, pp-removal", vec![91.2, 85.7], 0.88, 51.4, 1.15),
        ("stacked adapters, pp-removal", vec![90.1, 88.2], 0.86, 20.9, 1.54),
    ]
}

fn g_score_oracle() -> Outcome {
    let rows = table_rows();
    let mut worst = (0.0f64, "");
    let mut bad = Vec::new();
    for (name, acc, bs, ppl, printed) in &rows {
        let mean = acc.iter().sum::<f64>() / acc.len() as f64;
        let oracle = (mean * bs / ppl).powf(1.0 / 3.0);
        let g = g_score(acc, *bs, *ppl).expect("valid row");
        let dev = (g - printed).abs();
        if dev > worst.0 {
            worst = (dev, name);
        }
        if dev > 0.02 || (g - oracle).abs() > 1e-9 {
            bad.push(*name);
        }
    }
    outcome(bad.is_empty(), format!("{} rows, largest deviation {:.4} ({}), off: {bad:?}", rows.len(), worst.0, worst.1))
}

fn small_backbone(vocab: usize, seed: u64) -> BackboneModel {
    let config = BackboneConfig { encoder_layers: 2, decoder_layers: 2, hidden_dim: 16, heads: 2, ffn_dim: 24, max_len: 12, vocab_size: vocab };
    let mut m = BackboneModel::build(config, seed).expect("valid config");
    m.freeze();
    m
}

fn adapted(backbone: BackboneModel, schema: &AttributeSchema, plan: CompositionPlan, up: UpInit, scale: f64, seed: u64) -> AdaptedModel {
    let config = AdapterConfig { up_init: up, init_scale: scale, ..AdapterConfig::for_backbone(backbone.config(), 4) };
    let values: Vec<String> = schema.attributes().iter().flat_map(|a| a.values.clone()).collect();
    let banks = AdapterBanks::initialise(config, &values, seed).expect("banks");
    inject_adapters(backbone, banks, plan, schema.clone()).expect("wiring")
}

fn random_sentence(rng: &mut SeededRng, vocab: usize, len: usize) -> Vec<usize> {
    (0..len).map(|_| 4 + below(rng, vocab - 4)).collect()
}

fn identity_at_zero() -> Outcome {
    let schema = AttributeSchema::tense_voice();
    let mut rng = seeded(3);
    let batch: Vec<Vec<usize>> = (0..3).map(|i| random_sentence(&mut rng, 20, 3 + i)).collect();
    let prefixes: Vec<Vec<usize>> = batch.iter().map(|s| std::iter::once(1).chain(s.iter().copied()).collect()).collect();
    let mut compared = 0usize;
    let mut ok = true;
    for plan in [CompositionPlan::parallel_over(&schema), CompositionPlan::parse(STACK).unwrap()] {
        let backbone = small_backbone(20, 5);
        let bare_states = backbone.encode(&batch).unwrap();
        let bare_logits = backbone.decode(&bare_states, &prefixes).unwrap();
        let model = adapted(backbone, &schema, plan, UpInit::Zero, 0.5, 9);
        let selection = model.plan.is_stack().then_some(StackSelection::AllCombinations);
        let routes = model.routes(selection.as_ref()).unwrap();
        let states = model.encode(&batch, selection.as_ref()).unwrap();
        for (route, stream) in routes.iter().zip(&states.streams) {
            ok &= stream.states.data() == bare_states.data();
            for (b, prefix) in prefixes.iter().enumerate() {
                let logits = model.decode(&stream.states.row(b), prefix, route).unwrap();
                ok &= logits.data() == bare_logits[b].data();
                compared += logits.len();
            }
        }
    }
    outcome(ok, format!("{compared} logits compared bit for bit over Parallel and Stack plans"))
}

fn gradient_check() -> Outcome {
    let schema = AttributeSchema::tense_voice();
    let mut model = adapted(small_backbone(16, 2), &schema, CompositionPlan::parallel_over(&schema), UpInit::Random, 0.3, 4);
    let routes = model.routes(None).unwrap();
    let mut rng = seeded(8);
    let source = random_sentence(&mut rng, 16, 4);
    let target = random_sentence(&mut rng, 16, 3);
    let loss = |m: &AdaptedModel, grads: Option<&mut styleadapt_core::graph::GradBuffer>| -> f64 {
        let mut g = if grads.is_some() { Graph::training(Group::Adapters) } else { Graph::inference() };
        let memories = m.encode_streams_graph(&mut g, &source, &routes);
        let parts: Vec<_> = routes.iter().zip(&memories).map(|(r, mem)| reconstruction_graph(m, &mut g, *mem, r, &target)).collect();
        let mut total = parts[0];
        for p in &parts[1..] {
            total = g.add(total, *p);
        }
        let v = g.value(total).item();
        if let Some(buf) = grads {
            g.backward(total, 1.0, buf);
        }
        v
    };
    let mut grads = model.banks.params().grad_buffer();
    loss(&model, Some(&mut grads));
    let n_params = model.banks.params().len();
    let h = 1e-6;
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut layers = std::collections::BTreeSet::new();
    while checked < 120 {
        let slot = below(&mut rng, n_params);
        let len = model.banks.params().get(slot).value.len();
        let k = below(&mut rng, len);
        let name = model.banks.params().names()[slot].clone();
        let orig = model.banks.params().get(slot).value.data()[k];
        model.banks.params_mut().value_mut(slot).data_mut()[k] = orig + h;
        let up = loss(&model, None);
        model.banks.params_mut().value_mut(slot).data_mut()[k] = orig - h;
        let down = loss(&model, None);
        model.banks.params_mut().value_mut(slot).data_mut()[k] = orig;
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads.grads[slot].data()[k];
        let scale = numeric.abs().max(analytic.abs());
        if scale < 1e-7 {
            continue;
        }
        worst = worst.max((numeric - analytic).abs() / scale);
        layers.insert(name.split('.').nth(1).unwrap_or("").to_string());
        checked += 1;
    }
    outcome(worst < 1e-4, format!("{checked} parameters over {} layers, max relative error {worst:.2e}", layers.len()))
}

fn reinforce_oracle() -> Outcome {
    // A two-step categorical policy over 3 tokens: logits a for x1, rows of B for x2 | x1.
    let mut rng = seeded(21);
    let a = uniform(&mut rng, 1, 3, 1.0);
    let b = uniform(&mut rng, 3, 3, 1.0);
    let values = vec!["x".to_string(), "y".to_string()];
    let classifier = AttributeClassifier::new("attr", &values, 3, ClassifierConfig { widths: vec![1, 2], filters: 4, embed_dim: 4, ..Default::default() }, 6).unwrap();
    let target = 1;
    let mut table = styleadapt_core::params::ParamTable::new(Group::Adapters);
    let sa = table.add("a", a.clone());
    let sb = table.add("b", b.clone());

    let p1 = softmax(a.row(0));
    let mut exact_a = [0.0; 3];
    let mut exact_b = [[0.0; 3]; 3];
    let mut surrogate = table.grad_buffer();
    for baseline in [0.0, -0.4] {
        surrogate.zero();
        exact_a = [0.0; 3];
        exact_b = [[0.0; 3]; 3];
        for x1 in 0..3 {
            let p2 = softmax(b.row(x1));
            for x2 in 0..3 {
                let p = p1[x1] * p2[x2];
                let reward = classifier.log_prob(&[x1, x2], target);
                // exact gradient of L = -E[r] by the softmax derivative
                for k in 0..3 {
                    exact_a[k] -= reward * p * (f64::from(u8::from(k == x1)) - p1[k]);
                    exact_b[x1][k] -= reward * p * (f64::from(u8::from(k == x2)) - p2[k]);
                }
                let mut g = Graph::training(Group::Adapters);
                let la = g.param(table.get(sa));
                let lb = g.param(table.get(sb));
                let row = g.gather_rows(lb, &[x1]);
                let n1 = g.nll_sum(la, &[x1]);
                let n2 = g.nll_sum(row, &[x2]);
                let nll = g.add(n1, n2);
                let term = policy_gradient_term(&mut g, nll, reward, baseline);
                g.backward(term, p, &mut surrogate);
            }
        }
    }
    let mut worst = 0.0f64;
    for k in 0..3 {
        worst = worst.max((surrogate.grads[sa].data()[k] - exact_a[k]).abs());
        for x1 in 0..3 {
            worst = worst.max((surrogate.grads[sb].get(x1, k) - exact_b[x1][k]).abs());
        }
    }
    outcome(worst < 1e-6, format!("9 sample paths, 12 parameters, max abs deviation {worst:.2e} (baseline -0.4)"))
}

fn stream_isolation() -> Outcome {
    let mut rng = seeded(17);
    let mut trials = 0;
    let mut ok = true;
    for k in 2..=5usize {
        let values: Vec<String> = (0..k).map(|i| format!("v{i}")).collect();
        let refs: Vec<&str> = values.iter().map(String::as_str).collect();
        let schema = AttributeSchema::from_pairs(&[("style", &refs)]).unwrap();
        for _ in 0..3 {
            // random order of the values inside the plan
            let mut order = values.clone();
            shuffle(&mut rng, &mut order);
            let plan = CompositionPlan::Parallel(order);
            let mut model = adapted(small_backbone(14, below(&mut rng, 1000) as u64), &schema, plan, UpInit::Random, 0.2, below(&mut rng, 1000) as u64);
            let batch: Vec<Vec<usize>> = (0..2).map(|_| random_sentence(&mut rng, 14, 4)).collect();
            let prefix = vec![1, 5, 6];
            let routes = model.routes(None).unwrap();
            let snapshot = |m: &AdaptedModel| -> Vec<Vec<f64>> {
                let states = m.encode(&batch, None).unwrap();
                routes
                    .iter()
                    .zip(&states.streams)
                    .map(|(r, s)| {
                        let mut out = s.states.data().to_vec();
                        for b in 0..batch.len() {
                            out.extend_from_slice(m.decode(&s.states.row(b), &prefix, r).unwrap().data());
                        }
                        out
                    })
                    .collect()
            };
            let before = snapshot(&model);
            let victim = below(&mut rng, k);
            let bank = model.banks.index_of(&routes[victim].assignment[0]).unwrap();
            for slot in model.banks.bank_slots(bank) {
                for v in model.banks.params_mut().value_mut(slot).data_mut() {
                    *v += 0.05;
                }
            }
            let after = snapshot(&model);
            for s in 0..k {
                ok &= (before[s] == after[s]) == (s != victim);
            }
            trials += 1;
        }
    }
    outcome(ok, format!("{trials} random Parallel plans, K = 2..5"))
}

/// One run of the command-line pipeline shared by criteria 3, 8, 9 and 10.
struct Pipeline {
    root: PathBuf,
    stages: Vec<(String, i32, String, String)>,
    backbone_before: Option<String>,
}

impl Pipeline {
    fn run() -> Self {
        let root = std::env::temp_dir().join(format!("styleadapt-acceptance-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&root);
        std::fs::create_dir_all(&root).unwrap();
        let config = root.join("run.toml");
        std::fs::write(&config, format!("seed = {SEED}\n")).unwrap();
        let mut p = Pipeline { root: root.clone(), stages: Vec::new(), backbone_before: None };
        let stages: Vec<Vec<String>> = vec![
            vec!["gen-data".into()],
            vec!["pretrain-aux".into()],
            vec!["train".into()],
            vec!["transfer".into(), "--plan".into(), STACK.into(), "--directive".into(), "tense=future,voice=passive".into(), "the builder built the school".into()],
            vec!["transfer".into(), "the builder built the school".into()],
            vec!["evaluate".into()],
            vec!["evaluate".into(), "--plan".into(), STACK.into()],
        ];
        for args in stages {
            if args[0] == "train" {
                p.backbone_before = load_backbone(&Paths::new(&root).backbone()).ok().map(|(m, _)| m.checksum());
            }
            let out = Command::new(env!("CARGO_BIN_EXE_styleadapt"))
                .args(["--config".as_ref(), config.as_os_str()])
                .args(&args)
                .env("STYLEADAPT_ROOT", &root)
                .output()
                .expect("binary runs");
            let code = out.status.code().unwrap_or(-1);
            p.stages.push((args.join(" "), code, String::from_utf8_lossy(&out.stdout).into_owned(), String::from_utf8_lossy(&out.stderr).into_owned()));
            if code != 0 {
                break;
            }
        }
        p
    }

    fn paths(&self) -> Paths {
        Paths::new(&self.root)
    }

    fn stdout(&self, prefix: &str) -> Option<&str> {
        self.stages.iter().find(|s| s.0 == prefix || (prefix.ends_with('*') && s.0.starts_with(&prefix[..prefix.len() - 1]))).map(|s| s.2.as_str())
    }

    fn smoke(&self) -> Outcome {
        if let Some(failed) = self.stages.iter().find(|s| s.1 != 0) {
            return outcome(false, format!("`{}` exited {}: {}", failed.0, failed.1, failed.3.trim()));
        }
        let targeted: Vec<Value> = self.stdout("transfer --plan*").unwrap_or("").lines().filter_map(|l| serde_json::from_str(l).ok()).collect();
        let parallel = self.stdout("transfer the builder built the school").unwrap_or("").lines().count();
        let report = read_report(&self.paths().eval_report("parallel"));
        let csv = std::fs::read_to_string(self.paths().eval_csv("parallel")).unwrap_or_default();
        let (ok_report, detail) = match &report {
            Ok((rows, s)) => {
                let accs = s.acc.iter().all(|a| a.acc.is_some_and(f64::is_finite));
                (accs && s.bs.is_finite() && s.ppl.is_finite() && s.ppl > 0.0 && s.g.is_finite() && !rows.is_empty(), format!("G {:.3}", s.g))
            }
            Err(e) => (false, e.to_string()),
        };
        let header_ok = csv.starts_with("plan,acc_tense,acc_voice,bs,ppl,g");
        let single = targeted.len() == 1 && targeted[0]["stream"] == "future+passive";
        let ok = ok_report && header_ok && single && parallel == 5;
        outcome(ok, format!("{} stages exit 0, targeted Stack lines {}, Parallel lines {parallel}, report {detail}", self.stages.len(), targeted.len()))
    }

    fn frozen_backbone(&self) -> Outcome {
        let train: Option<Value> = self.stdout("train").and_then(|s| serde_json::from_str(s.trim()).ok());
        let Some(train) = train else { return outcome(false, "train stage did not complete") };
        let after = load_backbone(&self.paths().backbone()).map(|(m, _)| m.checksum()).ok();
        let before = self.backbone_before.clone();
        let logged_same = train["backbone_checksum_before"] == train["backbone_checksum_after"];
        let file_same = before.is_some() && before == after && before.as_deref() == train["backbone_checksum_after"].as_str();
        let adapters_moved = train["adapter_checksum_before"] != train["adapter_checksum_after"];
        let log_same = std::fs::read_to_string(self.paths().train_log())
            .map(|t| t.lines().all(|l| serde_json::from_str::<Value>(l).map(|v| v["backbone_checksum"] == train["backbone_checksum_before"]).unwrap_or(false)))
            .unwrap_or(false);
        outcome(
            logged_same && file_same && adapters_moved && log_same,
            format!("backbone {} unchanged in memory, on disk and in every log line; adapters changed: {adapters_moved}", &before.unwrap_or_default()[..12.min(64)]),
        )
    }

    fn parallel_transfer(&self) -> Outcome {
        let aux: Option<AuxOutcome> = std::fs::read_to_string(self.paths().aux_report()).ok().and_then(|t| serde_json::from_str(&t).ok());
        let Some(aux) = aux else { return outcome(false, "no auxiliary model report") };
        let gate = aux.classifiers.iter().flat_map(|c| [c.guide, c.eval]).fold(1.0f64, f64::min);
        let Ok((_, s)) = read_report(&self.paths().eval_report("parallel")) else { return outcome(false, "no Parallel report") };
        let min_stream = s.stream_acc.iter().map(|a| a.acc).fold(100.0f64, f64::min);
        let streams: Vec<String> = s.stream_acc.iter().map(|a| format!("{} {:.1}", a.stream, a.acc)).collect();
        let ok = min_stream >= 80.0 && s.bs >= 0.6 && gate >= 0.95;
        outcome(ok, format!("stream ACC [{}], BS {:.3}, PPL {:.1}, classifier gate {:.3}", streams.join(", "), s.bs, s.ppl, gate))
    }

    fn stack_reuse(&self) -> Outcome {
        let Ok((_, s)) = read_report(&self.paths().eval_report("stack")) else { return outcome(false, "no Stack report") };
        let joint = s.joint_acc.unwrap_or(0.0);
        outcome(joint >= 60.0, format!("joint accuracy {joint:.1}% over {} rows (chance floor <= 25%), BS {:.3}", s.rows, s.bs))
    }
}

impl Drop for Pipeline {
    fn drop(&mut self) {
        let _ = std::fs::remove_dir_all(&self.root);
    }
}
