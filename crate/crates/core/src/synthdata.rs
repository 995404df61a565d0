//! Deterministic synthetic multilingual, multi-speaker corpora.
//!
//! Each language owns a subset of a global token inventory and maps its
//! tokens injectively onto a smaller pool of shared acoustic units, so the
//! same unit spells different tokens in different languages. A weak
//! per-language accent shift and bigram token statistics carry the language
//! identity. Speakers apply an elementwise filter and an additive offset.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{derive_seed, rng_for};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub seed: u64,
    pub num_languages: usize,
    pub num_fewshot_languages: usize,
    pub utts_per_language: usize,
    pub fewshot_utts: usize,
    /// Add language-labelled, untranscribed items for few-shot languages.
    pub extended_fewshot: bool,
    pub extended_utts: usize,
    pub eval_utts_per_language: usize,
    /// Global token inventory size, excluding the blank.
    pub vocab_size: usize,
    pub tokens_per_language: usize,
    /// Largest allowed fraction of shared tokens between two languages.
    pub max_overlap: f64,
    pub num_units: usize,
    pub min_unit_distance: f64,
    pub feature_dim: usize,
    pub accent_scale: f64,
    /// Concentration of bigram rows; larger means more predictable chains.
    pub bigram_sharpness: f64,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub min_frames_per_token: usize,
    pub max_frames_per_token: usize,
    pub noise: f64,
    pub speaker_offset_scale: f64,
    pub speaker_filter_scale: f64,
    pub asr_train_speakers: usize,
    pub asr_eval_speakers: usize,
    pub sv_train_speakers: usize,
    pub sv_train_utts: usize,
    pub sv_eval_speakers: usize,
    pub sv_eval_utts: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            seed: 20240917,
            num_languages: 8,
            num_fewshot_languages: 4,
            utts_per_language: 120,
            fewshot_utts: 5,
            extended_fewshot: false,
            extended_utts: 20,
            eval_utts_per_language: 20,
            vocab_size: 40,
            tokens_per_language: 10,
            max_overlap: 0.3,
            num_units: 16,
            min_unit_distance: 2.5,
            feature_dim: 16,
            accent_scale: 0.5,
            bigram_sharpness: 1.0,
            min_tokens: 4,
            max_tokens: 8,
            min_frames_per_token: 2,
            max_frames_per_token: 4,
            noise: 0.5,
            speaker_offset_scale: 0.5,
            speaker_filter_scale: 0.15,
            asr_train_speakers: 60,
            asr_eval_speakers: 20,
            sv_train_speakers: 30,
            sv_train_utts: 12,
            sv_eval_speakers: 10,
            sv_eval_utts: 6,
        }
    }
}

impl CorpusSpec {
    pub fn total_languages(&self) -> usize {
        self.num_languages + self.num_fewshot_languages
    }

    pub fn is_fewshot(&self, lang: usize) -> bool {
        lang >= self.num_languages
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(m.to_string()));
        if self.total_languages() == 0 {
            return err("at least one language is required");
        }
        if self.tokens_per_language == 0 || self.tokens_per_language > self.vocab_size {
            return err("tokens per language must be in 1..=vocab size");
        }
        if self.tokens_per_language > self.num_units {
            return err("each language needs a distinct acoustic unit per token");
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return err("invalid utterance token range");
        }
        if self.min_frames_per_token == 0 || self.min_frames_per_token > self.max_frames_per_token {
            return err("invalid frames-per-token range");
        }
        if self.sv_eval_speakers < 2 || self.sv_eval_utts < 2 {
            return err("trials need at least two held-out speakers with two utterances each");
        }
        if self.feature_dim == 0 || self.asr_train_speakers == 0 || self.asr_eval_speakers == 0 || self.sv_train_speakers == 0 {
            return err("feature width and speaker pools must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguageModel {
    pub id: usize,
    /// Global token ids (1-based; 0 is the blank).
    pub tokens: Vec<usize>,
    /// Row-stochastic bigram matrix over `tokens` with a zero diagonal.
    pub transitions: Vec<Vec<f64>>,
    /// Acoustic unit of each token.
    pub units: Vec<usize>,
    /// Frame prototype of each token.
    pub prototypes: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerModel {
    pub offset: Vec<f64>,
    pub filter: Vec<f64>,
}

impl SpeakerModel {
    pub fn neutral(dim: usize) -> Self {
        SpeakerModel {
            offset: vec![0.0; dim],
            filter: vec![1.0; dim],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// `[T, C0]` frames.
    pub features: Tensor<f32>,
    pub language: Option<usize>,
    pub transcript: Option<Vec<usize>>,
    pub speaker: Option<usize>,
}

impl Utterance {
    pub fn has_labels(&self) -> bool {
        self.language.is_some() || self.transcript.is_some() || self.speaker.is_some()
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            v * scale
        })
        .collect()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Shared acoustic unit prototypes with a minimum pairwise distance.
pub fn gen_units(spec: &CorpusSpec) -> Result<Vec<Vec<f64>>> {
    let mut rng = rng_for(spec.seed, "units");
    let mut units: Vec<Vec<f64>> = Vec::with_capacity(spec.num_units);
    let mut tries = 0;
    while units.len() < spec.num_units {
        tries += 1;
        if tries > 100_000 {
            return Err(Error::Config("cannot place unit prototypes at the requested distance".into()));
        }
        let cand = normal_vec(&mut rng, spec.feature_dim, 1.0);
        if units.iter().all(|u| dist(u, &cand) >= spec.min_unit_distance) {
            units.push(cand);
        }
    }
    Ok(units)
}

/// Token subsets for all languages with pairwise overlap at most
/// `max_overlap · tokens_per_language`.
fn gen_vocabularies(spec: &CorpusSpec) -> Result<Vec<Vec<usize>>> {
    let k = spec.tokens_per_language;
    let limit = (spec.max_overlap * k as f64).floor() as usize;
    let mut rng = rng_for(spec.seed, "vocabularies");
    let all: Vec<usize> = (1..=spec.vocab_size).collect();
    let mut vocabs: Vec<Vec<usize>> = Vec::new();
    for _ in 0..spec.total_languages() {
        let mut placed = false;
        for _ in 0..20_000 {
            let mut cand: Vec<usize> = all.choose_multiple(&mut rng, k).copied().collect();
            cand.sort_unstable();
            let ok = vocabs.iter().all(|v| {
                let a: BTreeSet<_> = v.iter().collect();
                cand.iter().filter(|t| a.contains(t)).count() <= limit
            });
            if ok {
                vocabs.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Config(format!(
                "vocabulary of {} tokens too small for {} languages of {} tokens with overlap ≤ {}",
                spec.vocab_size,
                spec.total_languages(),
                k,
                spec.max_overlap
            )));
        }
    }
    Ok(vocabs)
}

fn build_language(spec: &CorpusSpec, lang: usize, tokens: Vec<usize>, units: &[Vec<f64>]) -> LanguageModel {
    let mut rng = rng_for(spec.seed, &format!("language:{lang}"));
    let k = tokens.len();
    let mut unit_ids: Vec<usize> = (0..units.len()).collect();
    unit_ids.shuffle(&mut rng);
    unit_ids.truncate(k);
    let accent = normal_vec(&mut rng, spec.feature_dim, spec.accent_scale / (spec.feature_dim as f64).sqrt());
    let prototypes = unit_ids
        .iter()
        .map(|&u| units[u].iter().zip(&accent).map(|(a, b)| a + b).collect())
        .collect();
    let transitions = (0..k)
        .map(|i| {
            let mut row: Vec<f64> = (0..k)
                .map(|j| {
                    if i == j || k == 1 {
                        0.0
                    } else {
                        let v: f64 = StandardNormal.sample(&mut rng);
                        (spec.bigram_sharpness * v).exp()
                    }
                })
                .collect();
            let total: f64 = row.iter().sum();
            if total > 0.0 {
                row.iter_mut().for_each(|p| *p /= total);
            } else {
                row[i] = 1.0;
            }
            row
        })
        .collect();
    LanguageModel {
        id: lang,
        tokens,
        transitions,
        units: unit_ids,
        prototypes,
    }
}

/// Language model for `lang`, deterministic in `(spec, lang)`.
pub fn gen_language(spec: &CorpusSpec, lang: usize) -> Result<LanguageModel> {
    spec.validate()?;
    if lang >= spec.total_languages() {
        return Err(Error::Config(format!("language {lang} out of range")));
    }
    let units = gen_units(spec)?;
    let mut vocabs = gen_vocabularies(spec)?;
    Ok(build_language(spec, lang, vocabs.swap_remove(lang), &units))
}

pub fn gen_languages(spec: &CorpusSpec) -> Result<Vec<LanguageModel>> {
    spec.validate()?;
    let units = gen_units(spec)?;
    let vocabs = gen_vocabularies(spec)?;
    Ok(vocabs
        .into_iter()
        .enumerate()
        .map(|(i, v)| build_language(spec, i, v, &units))
        .collect())
}

pub fn gen_speaker(spec: &CorpusSpec, pool: &str, index: usize) -> SpeakerModel {
    let mut rng = rng_for(spec.seed, &format!("speaker:{pool}:{index}"));
    let d = spec.feature_dim;
    let offset = normal_vec(&mut rng, d, spec.speaker_offset_scale / (d as f64).sqrt() * 2.0);
    let filter = normal_vec(&mut rng, d, spec.speaker_filter_scale)
        .into_iter()
        .map(|v| 1.0 + v)
        .collect();
    SpeakerModel { offset, filter }
}

fn sample_index(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Token positions (into `lang.tokens`) of a bigram chain of `len` tokens.
pub fn sample_chain(rng: &mut ChaCha8Rng, lang: &LanguageModel, len: usize) -> Vec<usize> {
    let k = lang.tokens.len();
    let mut out = Vec::with_capacity(len);
    let mut cur = rng.random_range(0..k);
    out.push(cur);
    for _ in 1..len {
        cur = sample_index(rng, &lang.transitions[cur]);
        out.push(cur);
    }
    out
}

/// Renders a token chain: each token emits `durations[i]` frames of
/// `filter ⊙ prototype + offset + noise`.
pub fn render(
    rng: &mut ChaCha8Rng,
    lang: &LanguageModel,
    speaker: &SpeakerModel,
    chain: &[usize],
    durations: &[usize],
    noise: f64,
) -> Tensor<f32> {
    let d = speaker.offset.len();
    let mut data = Vec::new();
    for (&pos, &dur) in chain.iter().zip(durations) {
        let proto = &lang.prototypes[pos];
        for _ in 0..dur {
            for c in 0..d {
                let n: f64 = if noise > 0.0 { StandardNormal.sample(rng) } else { 0.0 };
                let v = speaker.filter[c] * proto[c] + speaker.offset[c] + noise * n;
                data.push(v as f32);
            }
        }
    }
    let t = data.len() / d;
    Tensor::new(vec![t, d], data).expect("at least one frame")
}

/// One utterance with a transcript, its own RNG stream derived from `id`.
pub fn gen_utterance(
    spec: &CorpusSpec,
    id: &str,
    lang: &LanguageModel,
    speaker: &SpeakerModel,
    noise: f64,
) -> (Tensor<f32>, Vec<usize>) {
    let mut rng = rand::SeedableRng::seed_from_u64(derive_seed(spec.seed, id));
    gen_with_rng(&mut rng, spec, lang, speaker, noise)
}

fn gen_with_rng(
    rng: &mut ChaCha8Rng,
    spec: &CorpusSpec,
    lang: &LanguageModel,
    speaker: &SpeakerModel,
    noise: f64,
) -> (Tensor<f32>, Vec<usize>) {
    let len = rng.random_range(spec.min_tokens..=spec.max_tokens);
    let chain = sample_chain(rng, lang, len);
    let durations: Vec<usize> = (0..len)
        .map(|_| rng.random_range(spec.min_frames_per_token..=spec.max_frames_per_token))
        .collect();
    let feats = render(rng, lang, speaker, &chain, &durations, noise);
    (feats, chain.iter().map(|&p| lang.tokens[p]).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trial {
    pub enroll: usize,
    pub test: usize,
    pub target: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub languages: Vec<LanguageModel>,
    /// Transcribed and language-labelled items (speakers unlabelled).
    pub asr_lid: Vec<Utterance>,
    /// Speaker-labelled items without language or transcript.
    pub sv: Vec<Utterance>,
    pub eval_normal: Vec<Utterance>,
    pub eval_fewshot: Vec<Utterance>,
    pub sv_eval: Vec<Utterance>,
    /// Pairs of indices into `sv_eval`.
    pub trials: Vec<Trial>,
}

impl Corpus {
    /// Mixed-label training items.
    pub fn train(&self) -> impl Iterator<Item = &Utterance> {
        self.asr_lid.iter().chain(&self.sv)
    }
}

/// Builds all training and evaluation splits.
pub fn build_corpora(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let languages = gen_languages(spec)?;
    let asr_train: Vec<SpeakerModel> = (0..spec.asr_train_speakers).map(|i| gen_speaker(spec, "asr-train", i)).collect();
    let asr_eval: Vec<SpeakerModel> = (0..spec.asr_eval_speakers).map(|i| gen_speaker(spec, "asr-eval", i)).collect();
    let sv_train: Vec<SpeakerModel> = (0..spec.sv_train_speakers).map(|i| gen_speaker(spec, "sv-train", i)).collect();
    let sv_eval_spk: Vec<SpeakerModel> = (0..spec.sv_eval_speakers).map(|i| gen_speaker(spec, "sv-eval", i)).collect();

    let labelled = |id: String, lang: &LanguageModel, pool: &[SpeakerModel], transcript: bool| -> Utterance {
        let mut rng: ChaCha8Rng = rand::SeedableRng::seed_from_u64(derive_seed(spec.seed, &id));
        let spk = &pool[rng.random_range(0..pool.len())];
        let (features, tokens) = gen_with_rng(&mut rng, spec, lang, spk, spec.noise);
        Utterance {
            id,
            features,
            language: Some(lang.id),
            transcript: transcript.then_some(tokens),
            speaker: None,
        }
    };

    let mut asr_lid = Vec::new();
    let mut eval_normal = Vec::new();
    let mut eval_fewshot = Vec::new();
    for lang in &languages {
        let fewshot = spec.is_fewshot(lang.id);
        let n = if fewshot { spec.fewshot_utts } else { spec.utts_per_language };
        for i in 0..n {
            asr_lid.push(labelled(format!("train-l{:02}-{i:04}", lang.id), lang, &asr_train, true));
        }
        if fewshot && spec.extended_fewshot {
            for i in 0..spec.extended_utts {
                asr_lid.push(labelled(format!("ext-l{:02}-{i:04}", lang.id), lang, &asr_train, false));
            }
        }
        let split = if fewshot { &mut eval_fewshot } else { &mut eval_normal };
        for i in 0..spec.eval_utts_per_language {
            split.push(labelled(format!("eval-l{:02}-{i:04}", lang.id), lang, &asr_eval, true));
        }
    }

    let unlabelled_lang = |id: &str, spk: &SpeakerModel| -> Tensor<f32> {
        let mut rng: ChaCha8Rng = rand::SeedableRng::seed_from_u64(derive_seed(spec.seed, id));
        let lang = &languages[rng.random_range(0..languages.len())];
        gen_with_rng(&mut rng, spec, lang, spk, spec.noise).0
    };
    let mut sv = Vec::new();
    for (s, spk) in sv_train.iter().enumerate() {
        for i in 0..spec.sv_train_utts {
            let id = format!("sv-s{s:03}-{i:04}");
            sv.push(Utterance {
                features: unlabelled_lang(&id, spk),
                id,
                language: None,
                transcript: None,
                speaker: Some(s),
            });
        }
    }
    let mut sv_eval = Vec::new();
    for (s, spk) in sv_eval_spk.iter().enumerate() {
        for i in 0..spec.sv_eval_utts {
            let id = format!("sveval-s{s:03}-{i:04}");
            sv_eval.push(Utterance {
                features: unlabelled_lang(&id, spk),
                id,
                language: None,
                transcript: None,
                speaker: Some(spec.sv_train_speakers + s),
            });
        }
    }
    let trials = make_trials(spec, &sv_eval)?;
    Ok(Corpus {
        spec: spec.clone(),
        languages,
        asr_lid,
        sv,
        eval_normal,
        eval_fewshot,
        sv_eval,
        trials,
    })
}

/// All same-speaker pairs plus an equal number of sampled different-speaker
/// pairs.
fn make_trials(spec: &CorpusSpec, utts: &[Utterance]) -> Result<Vec<Trial>> {
    let mut targets = Vec::new();
    let mut nontargets = Vec::new();
    for a in 0..utts.len() {
        for b in a + 1..utts.len() {
            let same = utts[a].speaker == utts[b].speaker;
            let t = Trial {
                enroll: a,
                test: b,
                target: same,
            };
            if same {
                targets.push(t);
            } else {
                nontargets.push(t);
            }
        }
    }
    if targets.is_empty() || nontargets.len() < targets.len() {
        return Err(Error::Config("insufficient speakers for balanced trials".into()));
    }
    let mut rng = rng_for(spec.seed, "trials");
    nontargets.shuffle(&mut rng);
    nontargets.truncate(targets.len());
    let mut trials: Vec<Trial> = targets.into_iter().chain(nontargets).collect();
    trials.sort_by_key(|t| (t.enroll, t.test));
    Ok(trials)
}

const GREEK: &str = "αβγδεζηθικλμνξοπρστυφχψω";

/// Printable symbol of a token id (0 is the blank).
pub fn token_symbol(id: usize) -> String {
    match id {
        0 => "<blank>".to_string(),
        1..=26 => ((b'a' + (id - 1) as u8) as char).to_string(),
        _ => GREEK
            .chars()
            .nth(id - 27)
            .map(String::from)
            .unwrap_or_else(|| format!("<{id}>")),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub features: String,
    pub frames: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub language: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub transcript: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub speaker: Option<usize>,
}

pub const SPLITS: [&str; 5] = ["train_asr_lid", "train_sv", "eval_normal", "eval_fewshot", "eval_sv"];

impl Corpus {
    fn split(&self, name: &str) -> &[Utterance] {
        match name {
            "train_asr_lid" => &self.asr_lid,
            "train_sv" => &self.sv,
            "eval_normal" => &self.eval_normal,
            "eval_fewshot" => &self.eval_fewshot,
            _ => &self.sv_eval,
        }
    }
}

/// Writes manifests (JSON lines), feature tensors, trials, the vocabulary and
/// the language models under `dir`.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("feats"))?;
    for name in SPLITS {
        let mut w = BufWriter::new(fs::File::create(dir.join(format!("{name}.jsonl")))?);
        for u in corpus.split(name) {
            let rel = format!("feats/{}.bin", u.id);
            u.features.save(&dir.join(&rel))?;
            let entry = ManifestEntry {
                id: u.id.clone(),
                features: rel,
                frames: u.features.rows(),
                language: u.language,
                transcript: u.transcript.clone(),
                speaker: u.speaker,
            };
            writeln!(w, "{}", serde_json::to_string(&entry)?)?;
        }
        w.flush()?;
    }
    let mut w = BufWriter::new(fs::File::create(dir.join("trials.txt"))?);
    for t in &corpus.trials {
        let label = if t.target { "target" } else { "nontarget" };
        writeln!(w, "{} {} {label}", corpus.sv_eval[t.enroll].id, corpus.sv_eval[t.test].id)?;
    }
    w.flush()?;
    let vocab: Vec<String> = (0..=corpus.spec.vocab_size).map(token_symbol).collect();
    fs::write(dir.join("vocab.txt"), vocab.join("\n") + "\n")?;
    fs::write(dir.join("spec.json"), serde_json::to_string_pretty(&corpus.spec)? + "\n")?;
    fs::write(dir.join("languages.json"), serde_json::to_string(&corpus.languages)? + "\n")?;
    Ok(())
}

fn read_split(dir: &Path, name: &str) -> Result<Vec<Utterance>> {
    let path = dir.join(format!("{name}.jsonl"));
    let file = fs::File::open(&path)
        .map_err(|e| Error::Format(format!("missing split {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line)?;
        let features = Tensor::load(&dir.join(&entry.features))?;
        if features.rows() != entry.frames {
            return Err(Error::Format(format!("{}: frame count mismatch", entry.id)));
        }
        out.push(Utterance {
            id: entry.id,
            features,
            language: entry.language,
            transcript: entry.transcript,
            speaker: entry.speaker,
        });
    }
    Ok(out)
}

pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let spec: CorpusSpec = serde_json::from_str(&fs::read_to_string(dir.join("spec.json"))?)?;
    let languages: Vec<LanguageModel> = serde_json::from_str(&fs::read_to_string(dir.join("languages.json"))?)?;
    let sv_eval = read_split(dir, "eval_sv")?;
    let index: std::collections::HashMap<&str, usize> =
        sv_eval.iter().enumerate().map(|(i, u)| (u.id.as_str(), i)).collect();
    let mut trials = Vec::new();
    for line in fs::read_to_string(dir.join("trials.txt"))?.lines() {
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(Error::Format(format!("bad trial line: {line}")));
        }
        let look = |id: &str| index.get(id).copied().ok_or_else(|| Error::Format(format!("unknown trial utterance {id}")));
        trials.push(Trial {
            enroll: look(parts[0])?,
            test: look(parts[1])?,
            target: parts[2] == "target",
        });
    }
    Ok(Corpus {
        asr_lid: read_split(dir, "train_asr_lid")?,
        sv: read_split(dir, "train_sv")?,
        eval_normal: read_split(dir, "eval_normal")?,
        eval_fewshot: read_split(dir, "eval_fewshot")?,
        spec,
        languages,
        sv_eval,
        trials,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_symbols() {
        assert_eq!(token_symbol(0), "<blank>");
        assert_eq!(token_symbol(1), "a");
        assert_eq!(token_symbol(26), "z");
        assert_eq!(token_symbol(27), "α");
        assert_eq!(token_symbol(40), "ξ");
    }

    #[test]
    fn neutral_noiseless_token_is_prototype() {
        let spec = CorpusSpec::default();
        let lang = gen_language(&spec, 0).unwrap();
        let mut rng = rng_for(1, "x");
        let f = render(&mut rng, &lang, &SpeakerModel::neutral(16), &[3], &[2], 0.0);
        for r in 0..2 {
            let expected: Vec<f32> = lang.prototypes[3].iter().map(|&v| v as f32).collect();
            assert_eq!(f.row_slice(r), expected.as_slice());
        }
    }

    #[test]
    fn too_small_vocabulary_is_rejected() {
        let spec = CorpusSpec {
            vocab_size: 12,
            ..Default::default()
        };
        assert!(matches!(gen_languages(&spec), Err(Error::Config(_))));
    }
}
