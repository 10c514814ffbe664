use nar_core::ctc::Vocab;
use nar_core::data::{generate, long_tail_spec, TaskSpec};
use nar_core::eval::corpus_eval;
use nar_core::models::train::train;
use nar_core::models::{Config, Method, Model};

#[test]
fn long_tail_length_histogram_matches_the_spec() {
    let spec = long_tail_spec(&TaskSpec::default());
    let n = 6000;
    let ds = generate(&spec, n).unwrap();
    let mut counts = vec![0usize; spec.longest() + 1];
    for u in &ds.utterances {
        counts[u.transcript.len()] += 1;
    }
    // Pool lengths into bins expecting at least 50 utterances each.
    let (mut chi2, mut bins) = (0.0, 0usize);
    let (mut obs, mut exp) = (0.0, 0.0);
    for len in 0..=spec.longest() {
        obs += counts[len] as f64;
        exp += spec.length_pmf(len) * n as f64;
        if exp >= 50.0 || len == spec.longest() {
            chi2 += (obs - exp) * (obs - exp) / exp;
            bins += 1;
            obs = 0.0;
            exp = 0.0;
        }
    }
    assert!(bins > 10);
    // Upper 0.1% point of chi-square is below df + 4.5 sqrt(2 df) for these df.
    let df = (bins - 1) as f64;
    assert!(chi2 < df + 4.5 * (2.0 * df).sqrt(), "chi2 {chi2} over {bins} bins");
}

fn trained_wer(sigma: f64) -> f64 {
    let spec = TaskSpec {
        vocab_size: 8,
        max_len: 8,
        feat_dim: 8,
        noise_sigma: sigma,
        confusability: 0.0,
        ..TaskSpec::default()
    };
    let ds = generate(&spec, 560).unwrap();
    let (train_set, dev) = ds.utterances.split_at(480);
    let mut cfg = Config::default();
    cfg.model.d_model = 16;
    cfg.model.d_ff = 32;
    cfg.model.enc_layers = 2;
    cfg.train.batch_size = 16;
    cfg.train.epochs = 4.0;
    cfg.train.warmup = 60;
    cfg.train.lr_factor = 3.0;
    let mut model = Model::new(Method::Ctc, cfg, Vocab::new(8).unwrap(), 8).unwrap();
    train(&mut model, train_set, None).unwrap();
    let pairs: Vec<_> = dev
        .iter()
        .map(|u| (u.transcript.0.clone(), model.decode(&u.features_f64()).unwrap().tokens))
        .collect();
    corpus_eval("ctc", &pairs, 5).unwrap().overall.wer
}

#[test]
fn heavier_noise_hurts_a_trained_model() {
    let clean = trained_wer(0.0);
    let noisy = trained_wer(1.5);
    assert!(noisy > clean, "clean {clean} noisy {noisy}");
}
