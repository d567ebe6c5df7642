mod common;

use std::collections::BTreeMap;
use std::fs;

use chainfed::checkpoint::{blob_path, load_checkpoint, save_checkpoint};
use chainfed::config::{load_config, ExperimentConfig, DEFAULT_LAMBDA, DEFAULT_THRESHOLD};
use chainfed::data::{
    load_jsonl_dataset, synth_dataset, train_eval_split, Rows, SynthKind, SynthParams, Vocab,
};
use chainfed::model::{LayerKind, ModelStack};
use chainfed::Error;
use common::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cluster_tokens(samples: usize, seed: u64) -> SynthParams {
    SynthParams {
        kind: SynthKind::ClusterTokens,
        samples,
        classes: 2,
        seq_len: 16,
        vocab: 64,
        difficulty: 0.6,
        seed,
    }
}

/// Mean-pooled embedding followed by a tanh layer and a softmax readout,
/// trained with hand-derived gradients.
struct DepthTwo {
    emb: Vec<Vec<f64>>,
    w1: Vec<Vec<f64>>,
    b1: Vec<f64>,
    w2: Vec<Vec<f64>>,
    b2: Vec<f64>,
}

impl DepthTwo {
    fn new(vocab: usize, d: usize, h: usize, c: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut m = |r: usize, k: usize, s: f64| -> Vec<Vec<f64>> {
            (0..r).map(|_| (0..k).map(|_| rng.random_range(-s..s)).collect()).collect()
        };
        DepthTwo {
            emb: m(vocab, d, 0.5),
            w1: m(d, h, 0.5),
            b1: vec![0.0; h],
            w2: m(h, c, 0.5),
            b2: vec![0.0; c],
        }
    }

    fn forward(&self, ids: &[usize]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let d = self.w1.len();
        let mut x = vec![0.0; d];
        for &t in ids {
            for (xi, e) in x.iter_mut().zip(&self.emb[t]) {
                *xi += e / ids.len() as f64;
            }
        }
        let a: Vec<f64> = (0..self.b1.len())
            .map(|j| (self.b1[j] + (0..d).map(|i| x[i] * self.w1[i][j]).sum::<f64>()).tanh())
            .collect();
        let z: Vec<f64> = (0..self.b2.len())
            .map(|k| self.b2[k] + a.iter().zip(&self.w2).map(|(ai, w)| ai * w[k]).sum::<f64>())
            .collect();
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        (x, a, e.into_iter().map(|v| v / s).collect())
    }

    fn step(&mut self, ids: &[usize], label: usize, lr: f64) {
        let (x, a, p) = self.forward(ids);
        let dz: Vec<f64> = p.iter().enumerate().map(|(k, &pk)| pk - f64::from(u8::from(k == label))).collect();
        let da: Vec<f64> = (0..a.len())
            .map(|j| (0..dz.len()).map(|k| dz[k] * self.w2[j][k]).sum::<f64>() * (1.0 - a[j] * a[j]))
            .collect();
        let dx: Vec<f64> = (0..x.len())
            .map(|i| (0..da.len()).map(|j| da[j] * self.w1[i][j]).sum())
            .collect();
        for j in 0..a.len() {
            for k in 0..dz.len() {
                self.w2[j][k] -= lr * a[j] * dz[k];
            }
        }
        for k in 0..dz.len() {
            self.b2[k] -= lr * dz[k];
        }
        for i in 0..x.len() {
            for j in 0..da.len() {
                self.w1[i][j] -= lr * x[i] * da[j];
            }
        }
        for j in 0..da.len() {
            self.b1[j] -= lr * da[j];
        }
        for &t in ids {
            for i in 0..dx.len() {
                self.emb[t][i] -= lr * dx[i] / ids.len() as f64;
            }
        }
    }

    fn predict(&self, ids: &[usize]) -> usize {
        let (_, _, p) = self.forward(ids);
        (0..p.len()).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap()
    }
}

#[test]
fn cluster_tokens_is_learnable_by_a_depth_two_model() {
    let data = synth_dataset(&cluster_tokens(2000, 17)).unwrap();
    let Rows::Tokens { ids, .. } = data.rows() else { panic!() };
    let (train, eval) = train_eval_split(data.len(), 0.2, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut net = DepthTwo::new(64, 16, 16, 2, &mut rng);
    let mut order = train.clone();
    for _ in 0..15 {
        order.shuffle(&mut rng);
        for &i in &order {
            net.step(&ids[i], data.labels()[i], 0.1);
        }
    }
    let correct = eval.iter().filter(|&&i| net.predict(&ids[i]) == data.labels()[i]).count();
    let acc = correct as f64 / eval.len() as f64;
    assert!(acc >= 0.99, "held-out accuracy {acc}");
}

fn vocab() -> Vocab {
    Vocab::new(BTreeMap::from([
        ("the".to_string(), 2),
        ("cat".to_string(), 3),
        ("sat".to_string(), 4),
    ]))
    .unwrap()
}

#[test]
fn jsonl_ingestion() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    fs::write(
        &path,
        "{\"text\": \"the cat sat\", \"label\": 1}\n{\"text\": \"\", \"label\": 0}\n\n{\"text\": \"the dog\", \"label\": 0}\n",
    )
    .unwrap();
    let d = load_jsonl_dataset(&path, &vocab(), 4, 2).unwrap();
    let Rows::Tokens { ids, vocab: v } = d.rows() else { panic!() };
    assert_eq!(*v, 5);
    assert_eq!(ids[0], vec![2, 3, 4, 0]);
    assert_eq!(ids[1], vec![0, 0, 0, 0]);
    assert_eq!(ids[2], vec![2, 1, 0, 0]);
    assert_eq!(d.labels(), &[1, 0, 0]);
    assert_eq!(vocab().decode(&ids[0]), "the cat sat");
}

#[test]
fn jsonl_errors_cite_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    let mut text = String::new();
    for _ in 0..6 {
        text.push_str("{\"text\": \"cat\", \"label\": 0}\n");
    }
    text.push_str("{\"text\": \"cat\", \"lab\n");
    fs::write(&path, &text).unwrap();
    match load_jsonl_dataset(&path, &vocab(), 3, 2).unwrap_err() {
        Error::Dataset { line, .. } => assert_eq!(line, 7),
        other => panic!("{other}"),
    }
    fs::write(&path, "{\"text\": \"cat\", \"label\": 5}\n").unwrap();
    assert!(load_jsonl_dataset(&path, &vocab(), 3, 2).is_err());
}

#[test]
fn checkpoint_files_roundtrip_at_f32() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let mut stack = toy_stack(3, LayerKind::AttnLite, 4);
    perturb_adapters(&mut stack, 5);
    save_checkpoint(&stack, &path).unwrap();
    let back: ModelStack<f64> = load_checkpoint(&path).unwrap();
    for ((n1, a), (n2, b)) in stack.named_tensors().iter().zip(back.named_tensors()) {
        assert_eq!(n1, &n2);
        let narrow: Vec<u32> = a.data().iter().map(|&v| (v as f32).to_bits()).collect();
        let reread: Vec<u32> = b.data().iter().map(|&v| (v as f32).to_bits()).collect();
        assert_eq!(narrow, reread, "{n1}");
    }

    let blob = fs::read(blob_path(&path)).unwrap();
    fs::write(blob_path(&path), &blob[..blob.len() - 8]).unwrap();
    let err = load_checkpoint::<f64>(&path).unwrap_err();
    assert!(err.to_string().contains("length mismatch"), "{err}");
    fs::write(blob_path(&path), &blob).unwrap();

    let manifest = fs::read_to_string(&path).unwrap();
    fs::write(&path, manifest.replacen("final_head.b", "final_head.bias", 1)).unwrap();
    let err = load_checkpoint::<f64>(&path).unwrap_err();
    assert!(err.to_string().contains("final_head"), "{err}");
    assert_eq!(err.exit_code(), 4);
}

#[test]
fn config_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    fs::write(&path, "{}").unwrap();
    let cfg = load_config(&path).unwrap();
    assert_eq!(cfg.chain.lambda, DEFAULT_LAMBDA);
    assert_eq!(cfg.chain.threshold, Some(DEFAULT_THRESHOLD));

    fs::write(&path, cfg.to_json()).unwrap();
    assert_eq!(load_config(&path).unwrap(), cfg);

    fs::write(&path, r#"{"chain": {"lambda": -0.1}}"#).unwrap();
    match load_config(&path).unwrap_err() {
        Error::Config(e) => assert_eq!(e.paths(), vec!["chain.lambda"]),
        other => panic!("{other}"),
    }
    fs::write(&path, "{\"chain\": {\"threshold\": 0.9, \"start_layer\": 2}}").unwrap();
    assert_eq!(load_config(&path).unwrap_err().exit_code(), 2);
    for junk in ["", "[]", "{\"seed\": -1}", "{\"model\": null}", "\u{0}"] {
        fs::write(&path, junk).unwrap();
        assert_eq!(load_config(&path).unwrap_err().exit_code(), 2, "{junk:?}");
    }
    assert_eq!(load_config(&dir.path().join("missing.json")).unwrap_err().exit_code(), 4);
    assert!(ExperimentConfig::from_json("{\"mode\": \"no_foat\"}").is_ok());
}
