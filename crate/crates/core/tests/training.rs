use proptest::prelude::*;
use svtk::losses::{MarginKind, ScheduleKind};
use svtk::trainer::{train_toy, Stage, SynthConfig, SynthCorpus, TrainConfig};

fn small(mut cfg: TrainConfig) -> TrainConfig {
    cfg.corpus = SynthConfig { speakers: 4, utterances_per_speaker: 12, validation_per_speaker: 4, ..cfg.corpus };
    cfg.steps = 30;
    cfg.validate_every = 10;
    cfg
}

#[test]
fn margin_trace_follows_the_closed_form() {
    for base in [TrainConfig::stage1(), TrainConfig::stage2()] {
        let cfg = small(base);
        let corpus = SynthCorpus::generate(&cfg.corpus).unwrap();
        let out = train_toy(&corpus, &cfg, 3).unwrap();
        assert_eq!(out.history.len(), 30);
        let s = cfg.margin;
        for row in &out.history {
            let r = (row.step as f64 / s.total_steps as f64).min(1.0);
            let want = if row.step >= s.total_steps {
                s.end
            } else {
                match s.kind {
                    ScheduleKind::Linear => s.start + (s.end - s.start) * r,
                    ScheduleKind::Exponential => s.start * (s.end / s.start).powf(r),
                }
            };
            assert_eq!(row.margin, want, "step {}", row.step);
        }
    }
}

#[test]
fn fine_tune_preset() {
    let cfg = TrainConfig::stage2();
    assert_eq!(cfg.stage, Stage::FineTune);
    assert!(!cfg.inter_topk_enabled());
    assert_eq!(cfg.loss.kind, MarginKind::Aam);
    assert_eq!(cfg.margin.kind, ScheduleKind::Exponential);
    assert_eq!((cfg.margin.start, cfg.margin.end), (0.2, 0.5));
    assert!(cfg.drop_perturbed);
    let base = TrainConfig::stage1();
    assert!(base.inter_topk_enabled());
    assert_eq!(base.loss.kind, MarginKind::Am);
    assert_eq!(TrainConfig::parse("stage = 2\n").unwrap(), cfg);
}

#[test]
fn training_is_deterministic_and_seed_sensitive() {
    let cfg = small(TrainConfig::stage1());
    let corpus = SynthCorpus::generate(&cfg.corpus).unwrap();
    let a = train_toy(&corpus, &cfg, 1).unwrap();
    assert_eq!(a, train_toy(&corpus, &cfg, 1).unwrap());
    assert_ne!(a.history, train_toy(&corpus, &cfg, 2).unwrap().history);
}

#[test]
fn config_errors_name_the_line() {
    let err = TrainConfig::parse("steps = 10\nlr = fast\n").unwrap_err().to_string();
    assert!(err.contains("line 2"), "{err}");
    assert!(TrainConfig::parse("bogus = 1").is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn config_text_round_trips(
        stage2 in any::<bool>(),
        steps in 1u64..10_000,
        lr in 1e-5f64..1.0,
        batch in 1usize..256,
        top_k in 1usize..5,
        margin_end in 0.3f64..0.6,
        seed in any::<u64>(),
    ) {
        let mut cfg = if stage2 { TrainConfig::stage2() } else { TrainConfig::stage1() };
        cfg.steps = steps;
        cfg.lr = lr;
        cfg.batch_size = batch;
        cfg.loss.top_k = top_k;
        cfg.margin.end = margin_end;
        cfg.corpus.seed = seed;
        prop_assert_eq!(TrainConfig::parse(&cfg.to_string()).unwrap(), cfg);
    }
}
