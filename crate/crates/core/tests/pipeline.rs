mod common;

use casematch::corpus::{build_vocab, gen_ljp_dataset, gen_match_dataset, split_811, tokenize_ljp, tokenize_match, GenSpec, MatchExample};
use casematch::params::Checkpoint;
use casematch::pipeline::{
    evaluate, export_factor_embeddings, export_fusion_weights, parse_factor_embeddings, save_stage1, select_analysis_pairs,
    train_stage2, Ablation, MatchModel, Stage2Config, FACTOR_NAMES,
};
use casematch::pretrain::{run_pretraining, PretrainConfig};
use casematch::{EncoderConfig, Error, FusionMode, LjpExample};

fn spec() -> GenSpec {
    GenSpec { n_cases: 60, n_articles: 3, n_charges: 3, n_terms: 2, vocab_size: 48, seq_len: 9, seed: 3, ..GenSpec::default() }
}

fn encoder(vocab_size: usize) -> EncoderConfig {
    EncoderConfig { vocab_size, d_model: 8, n_shared_layers: 1, n_heads: 2, ffn_dim: 16, max_len: 10, dropout_rate: 0.1, seed: 3 }
}

struct Fixture {
    enc: EncoderConfig,
    ljp: Vec<LjpExample>,
    pairs: Vec<MatchExample>,
}

fn fixture(n_pairs: usize) -> Fixture {
    let s = spec();
    let ljp = gen_ljp_dataset(&s).unwrap();
    let pairs = gen_match_dataset(&s, n_pairs).unwrap();
    let texts: Vec<&str> = ljp.iter().map(|r| r.text.as_str()).collect();
    let vocab = build_vocab(&texts, s.vocab_size).unwrap();
    Fixture {
        enc: encoder(vocab.len()),
        ljp: tokenize_ljp(&ljp, &vocab, 10, &s.classes()).unwrap(),
        pairs: tokenize_match(&pairs, &vocab, 10).unwrap(),
    }
}

fn stage2(epochs: usize) -> Stage2Config {
    Stage2Config { epochs, seed: 9, ..Stage2Config::default() }
}

fn trained(fx: &Fixture, cfg: &Stage2Config) -> (MatchModel, casematch::pipeline::Stage2History) {
    let mut m = MatchModel::new(&fx.enc, cfg.ablation.fusion_mode(), cfg.seed).unwrap();
    let h = train_stage2(&mut m, &fx.pairs, cfg).unwrap();
    (m, h)
}

#[test]
fn same_seed_same_history() {
    let fx = fixture(16);
    let (_, a) = trained(&fx, &stage2(2));
    let (_, b) = trained(&fx, &stage2(2));
    assert_eq!(a, b);
    let (_, c) = trained(&fx, &Stage2Config { seed: 10, ..stage2(2) });
    assert_ne!(a.batch_losses, c.batch_losses);
}

#[test]
fn no_fusion_records_uniform_weights() {
    let fx = fixture(16);
    let cfg = Stage2Config { ablation: Ablation { no_fusion: true, ..Default::default() }, ..stage2(1) };
    let (m, h) = trained(&fx, &cfg);
    for e in &h.epochs {
        assert_eq!(e.weight_min, [0.25; 4]);
        assert_eq!(e.weight_max, [0.25; 4]);
    }
    assert!(fx.pairs.iter().all(|ex| m.predict(ex).unwrap().weights == [0.25; 4]));
}

#[test]
fn dropping_both_regularizers_equals_zero_lambdas() {
    let fx = fixture(12);
    let flags = Stage2Config { ablation: Ablation { no_ex: true, no_sh: true, ..Default::default() }, ..stage2(2) };
    let zeros = Stage2Config { lambda1: 0.0, lambda2: 0.0, ..stage2(2) };
    let (ma, a) = trained(&fx, &flags);
    let (mb, b) = trained(&fx, &zeros);
    assert_eq!(a.batch_losses, b.batch_losses);
    for id in ma.net.ids() {
        assert_eq!(ma.net.get(id), mb.net.get(id));
    }
}

#[test]
fn checkpoint_round_trip() {
    let fx = fixture(12);
    let (m, _) = trained(&fx, &stage2(1));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    m.save(&path).unwrap();
    let back = MatchModel::load(&path).unwrap();
    assert_eq!(back.fusion, FusionMode::Entropy);
    for id in m.net.ids() {
        let name = m.net.name(id);
        let orig: Vec<f64> = m.net.get(id).data().iter().map(|&v| v as f32 as f64).collect();
        assert_eq!(back.net.by_name(name).unwrap().data(), orig.as_slice(), "{name}");
    }
    for id in m.disc_store.ids() {
        let name = m.disc_store.name(id);
        let orig: Vec<f64> = m.disc_store.get(id).data().iter().map(|&v| v as f32 as f64).collect();
        assert_eq!(back.disc_store.by_name(name).unwrap().data(), orig.as_slice(), "{name}");
    }
    for ex in &fx.pairs {
        let (a, b) = (m.predict(ex).unwrap(), back.predict(ex).unwrap());
        assert!(a.fused.iter().zip(&b.fused).all(|(x, y)| (x - y).abs() < 1e-3));
    }
}

#[test]
fn stage1_checkpoint_feeds_stage2() {
    let fx = fixture(8);
    let cfg = PretrainConfig { epochs: 1, ..PretrainConfig::default() };
    let out = run_pretraining(&fx.ljp, spec().classes(), &fx.enc, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s1.ckpt");
    save_stage1(&out, &path).unwrap();
    let ckpt = Checkpoint::load(&path).unwrap();

    let mut m = MatchModel::new(&fx.enc, FusionMode::Entropy, 1).unwrap();
    m.load_extractor(&ckpt).unwrap();
    let embed = m.net.by_name("enc.embed").unwrap();
    let expect: Vec<f64> = out.store.by_name("enc.embed").unwrap().data().iter().map(|&v| v as f32 as f64).collect();
    assert_eq!(embed.data(), expect.as_slice());

    let wider = EncoderConfig { d_model: 16, ffn_dim: 32, ..fx.enc.clone() };
    let mut other = MatchModel::new(&wider, FusionMode::Entropy, 1).unwrap();
    assert!(matches!(other.load_extractor(&ckpt), Err(Error::Checkpoint(_))));
    let bigger_vocab = EncoderConfig { vocab_size: fx.enc.vocab_size + 5, ..fx.enc.clone() };
    let mut other = MatchModel::new(&bigger_vocab, FusionMode::Entropy, 1).unwrap();
    assert!(matches!(other.load_extractor(&ckpt), Err(Error::Checkpoint(_))));
}

#[test]
fn evaluate_rejects_empty_input() {
    let fx = fixture(8);
    let m = MatchModel::new(&fx.enc, FusionMode::Entropy, 1).unwrap();
    assert!(matches!(evaluate(&m, &[]), Err(Error::EmptyDataset)));
    let metrics = evaluate(&m, &fx.pairs).unwrap();
    for v in [metrics.accuracy, metrics.precision, metrics.recall, metrics.f1] {
        assert!((0.0..=1.0).contains(&v));
    }
}

#[test]
fn rejects_out_of_range_match_label() {
    let mut fx = fixture(8);
    fx.pairs[3].label = 4;
    let mut m = MatchModel::new(&fx.enc, FusionMode::Entropy, 1).unwrap();
    assert!(matches!(train_stage2(&mut m, &fx.pairs, &stage2(1)), Err(Error::Invalid(_))));
}

#[test]
fn analysis_selection_counts() {
    let fx = fixture(1000);
    let chosen = select_analysis_pairs(&fx.pairs, 200);
    assert_eq!(chosen.len(), 400);
    assert_eq!(chosen.iter().filter(|e| e.label == 3).count(), 200);
    assert_eq!(chosen.iter().filter(|e| e.label == 0).count(), 200);
}

#[test]
fn embedding_export_round_trips() {
    let fx = fixture(12);
    let m = MatchModel::new(&fx.enc, FusionMode::Entropy, 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("emb.tsv");
    let rows = export_factor_embeddings(&m, &fx.pairs, &path).unwrap();
    assert_eq!(rows, 4 * 2 * fx.pairs.len());
    let parsed = parse_factor_embeddings(&path).unwrap();
    assert_eq!(parsed.len(), rows);
    for (i, row) in parsed.iter().enumerate() {
        let ex = &fx.pairs[i / 8];
        let case = if (i / 4) % 2 == 0 { &ex.source } else { &ex.target };
        assert_eq!(row.case_id, case.id);
        assert_eq!(row.label, ex.label);
        assert_eq!(row.factor, FACTOR_NAMES[i % 4]);
        let df = m.disentangled(&case.tokens).unwrap();
        let v = match i % 4 {
            0 => &df.shared,
            k => &df.exclusive[k - 1],
        };
        let expect: Vec<f32> = v.iter().map(|&x| x as f32).collect();
        assert_eq!(row.values, expect);
    }
    let again = dir.path().join("emb2.tsv");
    export_factor_embeddings(&m, &fx.pairs, &again).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
}

/// Independent quantile: the value at fractional rank q·(n−1) by direct
/// interpolation over a freshly sorted copy.
fn oracle_quantile(values: &[f64], q: f64) -> f64 {
    let mut s = values.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let h = (s.len() - 1) as f64 * q;
    let below = h as usize;
    if below + 1 >= s.len() {
        return s[below];
    }
    s[below] * (1.0 - (h - below as f64)) + s[below + 1] * (h - below as f64)
}

#[test]
fn weight_export_and_summaries() {
    let fx = fixture(24);
    let m = MatchModel::new(&fx.enc, FusionMode::Entropy, 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (records, summary) = export_fusion_weights(&m, &fx.pairs, &dir.path().join("w.jsonl")).unwrap();
    assert_eq!(records.len(), fx.pairs.len());
    for r in &records {
        assert!((r.weights.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
    for k in 0..4 {
        let col: Vec<f64> = records.iter().map(|r| r.weights[k]).collect();
        let f = summary.heads[k];
        for (got, q) in [(f.min, 0.0), (f.q1, 0.25), (f.median, 0.5), (f.q3, 0.75), (f.max, 1.0)] {
            assert!((got - oracle_quantile(&col, q)).abs() < 1e-9);
        }
    }
    let loaded: Vec<casematch::pipeline::WeightRecord> = casematch::corpus::load_dataset(&dir.path().join("w.jsonl")).unwrap();
    assert_eq!(loaded, records);

    let uniform = MatchModel { fusion: FusionMode::Uniform, ..m };
    let (_, summary) = export_fusion_weights(&uniform, &fx.pairs, &dir.path().join("u.jsonl")).unwrap();
    for f in summary.heads {
        assert_eq!([f.min, f.q1, f.median, f.q3, f.max], [0.25; 5]);
    }
    assert!(matches!(export_fusion_weights(&uniform, &[], &dir.path().join("e.jsonl")), Err(Error::EmptyDataset)));
}

#[test]
fn split_is_positional() {
    let items: Vec<usize> = (0..50).collect();
    let (a, b, c) = split_811(&items);
    assert_eq!((a.len(), b.len(), c.len()), (40, 5, 5));
    assert_eq!(c[0], 45);
}
