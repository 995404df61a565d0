use std::collections::BTreeSet;

use casslr::harness::checkpoint;
use casslr::harness::config::OptimizerKind;
use casslr::harness::pipeline::{plan, run_pipeline, PipelineCache, PipelineOptions};
use casslr::harness::train::{build_items, probe_gradient_masks, run_stage, Optimizer, Stage, StageKind};
use casslr::harness::{ExperimentConfig, ExperimentMode};
use casslr::model::init_model;
use casslr::params::{hash_tensor, Block, ParamStore};
use casslr::synthdata::{build_corpora, Corpus, CorpusSpec};
use casslr::{Error, Tensor};

fn tiny_config(mode: ExperimentMode) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        mode,
        corpus: CorpusSpec {
            num_languages: 3,
            num_fewshot_languages: 1,
            utts_per_language: 8,
            fewshot_utts: 2,
            eval_utts_per_language: 3,
            asr_train_speakers: 6,
            asr_eval_speakers: 3,
            sv_train_speakers: 4,
            sv_train_utts: 3,
            sv_eval_speakers: 3,
            sv_eval_utts: 2,
            ..Default::default()
        },
        ..Default::default()
    };
    cfg.encoder.num_layers = 4;
    cfg.encoder.hidden = 16;
    cfg.encoder.heads = 2;
    cfg.encoder.ffn = 32;
    cfg.encoder.lid_group = 2;
    cfg.encoder.sv_group = 4;
    cfg.asr.width = 16;
    cfg.asr.heads = 2;
    cfg.asr.ffn = 32;
    cfg.lid.proj_width = 16;
    cfg.sv.proj_width = 16;
    let t = &mut cfg.training;
    for h in [&mut t.pretext, &mut t.decoders, &mut t.ca_l, &mut t.sv_decoder, &mut t.ca_ls, &mut t.full_finetune] {
        h.epochs = 1;
        h.batch_size = 8;
    }
    cfg
}

fn setup(mode: ExperimentMode) -> (ExperimentConfig, Corpus, ParamStore<f32>) {
    let cfg = tiny_config(mode);
    cfg.validate().unwrap();
    let corpus = build_corpora(&cfg.corpus).unwrap();
    let store = init_model(&cfg.model_config(), cfg.seed);
    (cfg, corpus, store)
}

fn changed_blocks(before: &ParamStore<f32>, after: &ParamStore<f32>) -> BTreeSet<Block> {
    before
        .iter()
        .filter(|(n, t)| hash_tensor(*t) != hash_tensor(after.get(n).unwrap()))
        .map(|(n, _)| Block::of(n))
        .collect()
}

fn run_kinds(kinds: &[StageKind], cfg: &ExperimentConfig, corpus: &Corpus, store: &mut ParamStore<f32>) {
    for &k in kinds {
        run_stage(&Stage::new(k, "", cfg), store, cfg, corpus).unwrap();
    }
}

#[test]
fn each_stage_changes_only_its_trainable_blocks() {
    let (cfg, corpus, mut store) = setup(ExperimentMode::CaHierLs);
    for kind in [StageKind::Pretext, StageKind::Decoders, StageKind::CaL, StageKind::SvDecoder, StageKind::CaLs] {
        let stage = Stage::new(kind, "", &cfg);
        let before = store.clone();
        let report = run_stage(&stage, &mut store, &cfg, &corpus).unwrap();
        let changed = changed_blocks(&before, &store);
        let allowed: BTreeSet<Block> = stage.trainable.iter().copied().collect();
        assert!(changed.is_subset(&allowed), "{}: {changed:?} outside {allowed:?}", stage.name);
        assert!(!changed.is_empty(), "{} trained nothing", stage.name);
        assert!(!changed.contains(&Block::Encoder) || kind == StageKind::Pretext);
        assert_eq!(report.frozen_blocks_checked, store.frozen_hashes().len());
    }
}

#[test]
fn adaptation_stage_trains_adapters_and_the_asr_decoder() {
    let (cfg, corpus, mut store) = setup(ExperimentMode::CaHierL);
    run_kinds(&[StageKind::Pretext, StageKind::Decoders], &cfg, &corpus, &mut store);
    let before = store.clone();
    run_kinds(&[StageKind::CaL], &cfg, &corpus, &mut store);
    let changed = changed_blocks(&before, &store);
    let want: BTreeSet<Block> = [Block::AsrDecoder, Block::LidFeat, Block::LidConditioner, Block::LidConditionProjection].into();
    assert_eq!(changed, want);
}

#[test]
fn stage_without_trainable_blocks_is_a_no_op() {
    let (cfg, corpus, mut store) = setup(ExperimentMode::CaHierL);
    let mut stage = Stage::new(StageKind::Decoders, "", &cfg);
    stage.trainable.clear();
    let before = store.clone();
    let report = run_stage(&stage, &mut store, &cfg, &corpus).unwrap();
    assert_eq!(report.trainable_params, 0);
    assert!(report.epochs.iter().all(|e| e.steps == 0));
    assert!(changed_blocks(&before, &store).is_empty());
}

#[test]
fn gradient_probes_cover_every_active_task() {
    let (cfg, corpus, store) = setup(ExperimentMode::CaHierLs);
    for (kind, expected) in [(StageKind::Decoders, 3), (StageKind::CaL, 2), (StageKind::SvDecoder, 1), (StageKind::CaLs, 3)] {
        let stage = Stage::new(kind, "", &cfg);
        let m = stage.model_config(&cfg);
        let items = build_items(&store, &m, corpus.train(), false).unwrap();
        let n = probe_gradient_masks(&store, &m, &stage, &items, &cfg.training.loss_weights).unwrap();
        assert_eq!(n, expected, "{}", stage.name);
    }
}

#[test]
fn sgd_step_applies_global_norm_clipping() {
    let mut store = ParamStore::new();
    store.insert("asr.a", Tensor::new(vec![2], vec![1.0f32, 1.0]).unwrap().with_requires_grad(true));
    store.insert("encoder.b", Tensor::new(vec![1], vec![1.0f32]).unwrap());
    let grads = vec![("asr.a".to_string(), vec![6.0f32, 8.0]), ("encoder.b".to_string(), vec![1.0f32])];
    let mut opt = Optimizer::new(OptimizerKind::Sgd, 5.0);
    opt.step(&mut store, &grads, 0.1).unwrap();
    let norm = (36.0f64 + 64.0 + 1.0).sqrt();
    let a = store.get("asr.a").unwrap().data();
    assert!((a[0] as f64 - (1.0 - 0.1 * 6.0 * 5.0 / norm)).abs() < 1e-6);
    assert!((a[1] as f64 - (1.0 - 0.1 * 8.0 * 5.0 / norm)).abs() < 1e-6);
    assert_eq!(store.get("encoder.b").unwrap().data(), &[1.0]);
    let bad = vec![("asr.a".to_string(), vec![f32::NAN, 0.0])];
    assert!(matches!(opt.step(&mut store, &bad, 0.1), Err(Error::Numerical(_))));
}

#[test]
fn adam_first_step_moves_each_weight_by_the_learning_rate() {
    let mut store = ParamStore::new();
    store.insert("asr.a", Tensor::new(vec![3], vec![0.0f32; 3]).unwrap().with_requires_grad(true));
    let grads = vec![("asr.a".to_string(), vec![0.5f32, -2.0, 0.01])];
    Optimizer::new(OptimizerKind::Adam, 0.0).step(&mut store, &grads, 0.01).unwrap();
    for (w, g) in store.get("asr.a").unwrap().data().iter().zip([0.5f32, -2.0, 0.01]) {
        assert!((*w + 0.01 * g.signum()).abs() < 1e-6, "{w}");
    }
}

#[test]
fn tampered_frozen_block_fails_to_load() {
    let (cfg, corpus, mut store) = setup(ExperimentMode::CaHierL);
    run_kinds(&[StageKind::Pretext, StageKind::Decoders], &cfg, &corpus, &mut store);
    let stage = Stage::new(StageKind::CaL, "", &cfg);
    store.set_trainable(|n| stage.is_trainable(n));
    let dir = tempfile::tempdir().unwrap();
    checkpoint::save(dir.path(), &cfg, &["pretext".into(), "decoders".into()], &store).unwrap();
    assert_eq!(checkpoint::load(dir.path()).unwrap().store, store);

    let file = dir.path().join("tensors").join("encoder.layer0.ff1.w.bin");
    let mut bytes = std::fs::read(&file).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x40;
    std::fs::write(&file, bytes).unwrap();
    assert!(matches!(checkpoint::load(dir.path()), Err(Error::InvariantBreach(_))));
}

#[test]
fn pipelines_are_deterministic_and_share_prefixes() {
    let cfg = tiny_config(ExperimentMode::CaHierL);
    let corpus = build_corpora(&cfg.corpus).unwrap();
    let a = run_pipeline(&cfg, &corpus, &mut PipelineCache::new(), PipelineOptions::default()).unwrap();
    let b = run_pipeline(&cfg, &corpus, &mut PipelineCache::new(), PipelineOptions::default()).unwrap();
    assert_eq!(a.report, b.report);
    assert_eq!(a.store, b.store);
    assert_eq!(a.completed, plan(&cfg).into_iter().map(|s| s.name).collect::<Vec<_>>());

    let mut cache = PipelineCache::new();
    let base_cfg = ExperimentConfig {
        mode: ExperimentMode::FrozenBaseline,
        ..cfg.clone()
    };
    let base = run_pipeline(&base_cfg, &corpus, &mut cache, PipelineOptions::default()).unwrap();
    let shared = run_pipeline(&cfg, &corpus, &mut cache, PipelineOptions::default()).unwrap();
    assert!(shared.stages[..2].iter().all(|s| s.reused));
    assert!(shared.stages[2..].iter().all(|s| !s.reused));
    assert_eq!(shared.store, a.store);
    for (name, h) in &base.stages[1].hashes {
        if Block::of(name) == Block::Encoder {
            assert_eq!(&shared.stages.last().unwrap().hashes[name], h);
        }
    }
}
