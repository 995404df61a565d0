use std::collections::HashSet;

use casslr::metrics::{corpus_cer, levenshtein};
use casslr::synthdata::{
    build_corpora, gen_languages, gen_utterance, read_corpus, write_corpus, CorpusSpec, LanguageModel, SpeakerModel,
};
use proptest::prelude::*;

fn small_spec() -> CorpusSpec {
    CorpusSpec {
        num_languages: 4,
        num_fewshot_languages: 2,
        utts_per_language: 10,
        fewshot_utts: 3,
        eval_utts_per_language: 4,
        sv_train_speakers: 5,
        sv_train_utts: 3,
        sv_eval_speakers: 4,
        sv_eval_utts: 3,
        ..Default::default()
    }
}

fn nearest_prototype_decode(lang: &LanguageModel, frames: &[f32], dim: usize) -> Vec<usize> {
    let mut out: Vec<usize> = vec![];
    for frame in frames.chunks(dim) {
        let best = lang
            .prototypes
            .iter()
            .enumerate()
            .map(|(i, p)| (i, p.iter().zip(frame).map(|(a, &b)| (a - b as f64).powi(2)).sum::<f64>()))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(i, _)| lang.tokens[i])
            .unwrap();
        if out.last() != Some(&best) {
            out.push(best);
        }
    }
    out
}

#[test]
fn corpora_are_deterministic_in_the_seed() {
    let spec = small_spec();
    assert_eq!(build_corpora(&spec).unwrap(), build_corpora(&spec).unwrap());
    let other = build_corpora(&CorpusSpec { seed: 1, ..spec }).unwrap();
    assert_ne!(other.asr_lid[0].features, build_corpora(&small_spec()).unwrap().asr_lid[0].features);
}

#[test]
fn utterances_depend_only_on_their_id() {
    let spec = small_spec();
    let langs = gen_languages(&spec).unwrap();
    let spk = SpeakerModel::neutral(spec.feature_dim);
    let a = gen_utterance(&spec, "x", &langs[0], &spk, 0.5);
    let _ = gen_utterance(&spec, "y", &langs[0], &spk, 0.5);
    assert_eq!(a, gen_utterance(&spec, "x", &langs[0], &spk, 0.5));
}

#[test]
fn token_overlap_is_bounded() {
    let spec = CorpusSpec::default();
    let langs = gen_languages(&spec).unwrap();
    for a in &langs {
        assert_eq!(a.tokens.len(), spec.tokens_per_language);
        let units: HashSet<usize> = a.units.iter().copied().collect();
        assert_eq!(units.len(), a.units.len(), "token-to-unit map must be injective");
        for b in &langs {
            if a.id < b.id {
                let sa: HashSet<_> = a.tokens.iter().collect();
                let shared = b.tokens.iter().filter(|t| sa.contains(t)).count();
                assert!(shared as f64 <= spec.max_overlap * spec.tokens_per_language as f64);
            }
        }
    }
}

#[test]
fn clean_frames_decode_by_nearest_prototype() {
    let spec = CorpusSpec::default();
    let langs = gen_languages(&spec).unwrap();
    let spk = SpeakerModel::neutral(spec.feature_dim);
    let mut pairs = vec![];
    for lang in &langs {
        for i in 0..25 {
            let (feats, transcript) = gen_utterance(&spec, &format!("probe{}:{i}", lang.id), lang, &spk, 0.1);
            let hyp = nearest_prototype_decode(lang, feats.data(), spec.feature_dim);
            pairs.push((hyp, transcript));
        }
    }
    let cer = corpus_cer(pairs.iter().map(|(h, r)| (h.as_slice(), r.as_slice()))).unwrap();
    assert!(cer < 0.05, "nearest-prototype CER {cer}");
}

#[test]
fn transcripts_never_repeat_a_token() {
    let c = build_corpora(&small_spec()).unwrap();
    for u in c.asr_lid.iter().chain(&c.eval_normal) {
        let t = u.transcript.as_ref().unwrap();
        assert!(t.windows(2).all(|w| w[0] != w[1]));
        assert!(t.iter().all(|&k| k >= 1 && k <= c.spec.vocab_size));
    }
}

#[test]
fn splits_carry_the_expected_labels() {
    let spec = small_spec();
    let c = build_corpora(&spec).unwrap();
    let expected_train = spec.num_languages * spec.utts_per_language + spec.num_fewshot_languages * spec.fewshot_utts;
    assert_eq!(c.asr_lid.len(), expected_train);
    assert!(c.asr_lid.iter().all(|u| u.language.is_some() && u.transcript.is_some() && u.speaker.is_none()));
    assert!(c.sv.iter().all(|u| u.speaker.is_some() && u.language.is_none() && u.transcript.is_none()));
    assert_eq!(c.sv.len(), spec.sv_train_speakers * spec.sv_train_utts);
    assert!(c.eval_fewshot.iter().all(|u| spec.is_fewshot(u.language.unwrap())));
    assert!(c.eval_normal.iter().all(|u| !spec.is_fewshot(u.language.unwrap())));
}

#[test]
fn extended_fewshot_adds_untranscribed_items() {
    let spec = CorpusSpec {
        extended_fewshot: true,
        extended_utts: 4,
        ..small_spec()
    };
    let c = build_corpora(&spec).unwrap();
    let extra = c.asr_lid.iter().filter(|u| u.transcript.is_none()).count();
    assert_eq!(extra, spec.num_fewshot_languages * spec.extended_utts);
    assert!(c.asr_lid.iter().all(|u| u.language.is_some()));
}

#[test]
fn trials_are_balanced_and_labelled_by_speaker() {
    let c = build_corpora(&small_spec()).unwrap();
    let targets = c.trials.iter().filter(|t| t.target).count();
    assert_eq!(targets * 2, c.trials.len());
    for t in &c.trials {
        assert_ne!(t.enroll, t.test);
        let same = c.sv_eval[t.enroll].speaker == c.sv_eval[t.test].speaker;
        assert_eq!(same, t.target);
    }
    let per = c.spec.sv_eval_utts;
    assert_eq!(targets, c.spec.sv_eval_speakers * per * (per - 1) / 2);
}

#[test]
fn written_corpus_reads_back() {
    let c = build_corpora(&small_spec()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_corpus(&c, dir.path()).unwrap();
    assert_eq!(read_corpus(dir.path()).unwrap(), c);
}

#[test]
fn invalid_specs_are_rejected() {
    let too_many_tokens = CorpusSpec {
        tokens_per_language: 50,
        ..small_spec()
    };
    assert!(build_corpora(&too_many_tokens).is_err());
    let no_languages = CorpusSpec {
        num_languages: 0,
        num_fewshot_languages: 0,
        ..small_spec()
    };
    assert!(build_corpora(&no_languages).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]
    #[test]
    fn bigram_rows_are_stochastic_without_self_loops(seed in 0u64..1000) {
        let spec = CorpusSpec { seed, ..CorpusSpec::default() };
        for lang in gen_languages(&spec).unwrap() {
            for (i, row) in lang.transitions.iter().enumerate() {
                prop_assert_eq!(row[i], 0.0);
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn edit_distance_is_a_metric(a in prop::collection::vec(0usize..4, 0..8), b in prop::collection::vec(0usize..4, 0..8), c in prop::collection::vec(0usize..4, 0..8)) {
        prop_assert_eq!(levenshtein(&a, &b), levenshtein(&b, &a));
        prop_assert!(levenshtein(&a, &c) <= levenshtein(&a, &b) + levenshtein(&b, &c));
        prop_assert_eq!(levenshtein(&a, &a), 0);
    }
}
