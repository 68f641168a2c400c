use std::f64::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{write_manifest, Corpus, Emotion, MocapPaths, Utterance};
use crate::audio::{write_wav, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::mocap::{MocapStream, StreamRole};
use crate::tensor::Tensor;
use crate::text::EmbeddingTable;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthMode {
    /// Every modality identifies the class on its own.
    Separable,
    /// Speech carries arousal only, text valence only, motion the full
    /// class on about half the utterances.
    PartialSignal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n: usize,
    pub seed: u64,
    pub mode: SynthMode,
    pub embedding_dim: usize,
    pub mocap_rate: f64,
    pub min_seconds: f64,
    pub max_seconds: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n: 32,
            seed: 0,
            mode: SynthMode::Separable,
            embedding_dim: 300,
            mocap_rate: 60.0,
            min_seconds: 3.0,
            max_seconds: 5.0,
        }
    }
}

const POOLS: [[&str; 6]; 4] = [
    ["furious", "hate", "shut", "unfair", "yelling", "ridiculous"],
    ["amazing", "wow", "great", "love", "party", "fantastic"],
    ["okay", "table", "meeting", "monday", "folder", "schedule"],
    ["miss", "lonely", "cry", "lost", "sorry", "tired"],
];
const FILLER: [&str; 10] = ["i", "the", "you", "it", "was", "and", "that", "we", "just", "really"];
const VOTE_NOISE: [&str; 6] = ["anger", "neutral", "sadness", "frustration", "surprise", "fear"];
const MOCAP_FREQS: [f64; 4] = [0.3, 0.6, 0.9, 1.2];

fn high_arousal(c: Emotion) -> bool {
    matches!(c, Emotion::Anger | Emotion::Excited)
}

fn negative_valence(c: Emotion) -> bool {
    matches!(c, Emotion::Anger | Emotion::Sadness)
}

/// Fixed per-corpus class signatures for the motion streams.
struct World {
    offsets: Vec<Vec<f64>>,
    phases: Vec<f64>,
}

impl World {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let channels = StreamRole::ALL.iter().map(|r| r.channels()).sum::<usize>();
        World {
            offsets: (0..4).map(|_| (0..channels).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect(),
            phases: (0..channels).map(|_| rng.gen_range(0.0..TAU)).collect(),
        }
    }
}

fn speech(rng: &mut ChaCha8Rng, class: Emotion, mode: SynthMode, seconds: f64) -> Vec<f64> {
    let f0 = match mode {
        SynthMode::Separable => [180.0, 260.0, 370.0, 520.0][class.index()],
        SynthMode::PartialSignal if high_arousal(class) => 520.0,
        SynthMode::PartialSignal => 180.0,
    } * rng.gen_range(0.97..1.03);
    let gain = rng.gen_range(0.25..0.5);
    let tremolo = rng.gen_range(2.0..5.0);
    let n = (seconds * SAMPLE_RATE as f64) as usize;
    (0..n)
        .map(|i| {
            let t = i as f64 / SAMPLE_RATE as f64;
            let tone = (TAU * f0 * t).sin() + 0.5 * (TAU * 2.0 * f0 * t).sin() + 0.25 * (TAU * 3.0 * f0 * t).sin();
            let env = 0.75 + 0.25 * (TAU * tremolo * t).sin();
            gain * env * tone / 1.75 + rng.gen_range(-0.03..0.03)
        })
        .collect()
}

fn transcript(rng: &mut ChaCha8Rng, class: Emotion, mode: SynthMode) -> String {
    let pool: Vec<&str> = match mode {
        SynthMode::Separable => POOLS[class.index()].to_vec(),
        SynthMode::PartialSignal => {
            let members: &[usize] = if negative_valence(class) { &[0, 3] } else { &[1, 2] };
            members.iter().flat_map(|&c| POOLS[c]).collect()
        }
    };
    let len = rng.gen_range(5..=12);
    let mut words: Vec<String> = (0..len)
        .map(|i| {
            let w = if i < 2 || rng.gen_bool(0.5) {
                *pool.choose(rng).expect("pool")
            } else {
                *FILLER.choose(rng).expect("filler")
            };
            w.to_string()
        })
        .collect();
    words.shuffle(rng);
    let mut s = words.join(" ");
    if let Some(first) = s.get_mut(0..1) {
        first.make_ascii_uppercase();
    }
    s.push(if rng.gen_bool(0.5) { '.' } else { '!' });
    s
}

fn votes(rng: &mut ChaCha8Rng, class: Emotion) -> Vec<String> {
    let raw = |rng: &mut ChaCha8Rng| match class {
        Emotion::Excited if rng.gen_bool(0.5) => "happiness".to_string(),
        c => c.name().to_string(),
    };
    let mut v = vec![raw(rng), raw(rng)];
    let noise = VOTE_NOISE.choose(rng).expect("noise");
    v.push(if rng.gen_bool(0.5) { raw(rng) } else { noise.to_string() });
    v.shuffle(rng);
    v
}

fn embeddings(rng: &mut ChaCha8Rng, dim: usize) -> Result<EmbeddingTable> {
    let centers: Vec<Vec<f64>> = (0..4).map(|_| (0..dim).map(|_| rng.gen_range(-0.5..0.5)).collect()).collect();
    let mut tokens = Vec::new();
    let mut data = Vec::new();
    for (c, pool) in POOLS.iter().enumerate() {
        for w in pool {
            tokens.push(w.to_string());
            data.extend(centers[c].iter().map(|m| m + rng.gen_range(-0.2..0.2)));
        }
    }
    for w in FILLER {
        tokens.push(w.to_string());
        data.extend((0..dim).map(|_| rng.gen_range(-0.5..0.5)));
    }
    let rows = tokens.len();
    EmbeddingTable::new(tokens, Tensor::new(vec![rows, dim], data)?)
}

fn mocap(
    rng: &mut ChaCha8Rng,
    world: &World,
    signal: usize,
    rate: f64,
    span: f64,
) -> Result<Vec<MocapStream>> {
    let samples = (span * rate).ceil() as usize;
    let times: Vec<f64> = (0..samples).map(|i| i as f64 / rate).collect();
    let amp = 0.5 + 0.25 * signal as f64;
    let freq = MOCAP_FREQS[signal];
    let mut offset = 0;
    StreamRole::ALL
        .iter()
        .map(|&role| {
            let c = role.channels();
            let base = offset;
            offset += c;
            let values = Tensor::from_fn(vec![samples, c], |k| {
                let (i, j) = (k / c, base + k % c);
                world.offsets[signal][j] + amp * (TAU * freq * times[i] + world.phases[j]).sin()
                    + rng.gen_range(-0.1..0.1)
            });
            MocapStream::new(role, times.clone(), values)
        })
        .collect()
}

/// Writes a balanced synthetic corpus (WAVs, motion CSVs, an embedding file
/// and `manifest.jsonl`) under `out` and returns it as loaded.
pub fn generate_synthetic(cfg: &SynthConfig, out: &Path) -> Result<Corpus> {
    if cfg.n < 8 {
        return Err(Error::Config(format!("synthetic corpus needs n >= 8, got {}", cfg.n)));
    }
    if !(cfg.min_seconds > 0.3 && cfg.max_seconds >= cfg.min_seconds) {
        return Err(Error::Config("synthetic durations must satisfy 0.3 < min <= max".into()));
    }
    for sub in ["wav", "mocap"] {
        let d = out.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let world = World::new(&mut rng);
    embeddings(&mut rng, cfg.embedding_dim)?.save(&out.join("embeddings.txt"))?;

    let mut utterances = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let class = Emotion::ALL[i % 4];
        let session = (i % 5) as u8 + 1;
        let speaker = format!("Ses{session:02}{}", if (i / 5) % 2 == 0 { 'F' } else { 'M' });
        let id = format!("{speaker}_{i:05}");
        let seconds = rng.gen_range(cfg.min_seconds..=cfg.max_seconds);

        let wav = PathBuf::from("wav").join(format!("{id}.wav"));
        write_wav(&out.join(&wav), &speech(&mut rng, class, cfg.mode, seconds))?;

        let signal = match cfg.mode {
            SynthMode::PartialSignal if rng.gen_bool(0.5) => rng.gen_range(0..4),
            _ => class.index(),
        };
        let start = 0.25;
        let mut paths = MocapPaths::default();
        for stream in mocap(&mut rng, &world, signal, cfg.mocap_rate, seconds + 2.0 * start)? {
            let rel = PathBuf::from("mocap").join(format!("{id}_{}.csv", stream.role().name()));
            stream.write_csv(&out.join(&rel))?;
            match stream.role() {
                StreamRole::Face => paths.face = Some(rel),
                StreamRole::Hand => paths.hand = Some(rel),
                StreamRole::Rotation => paths.rotation = Some(rel),
            }
        }
        utterances.push(Utterance {
            id,
            session,
            speaker,
            label: Some(class),
            votes: votes(&mut rng, class),
            wav: Some(wav),
            transcript: transcript(&mut rng, class, cfg.mode),
            mocap: paths,
            start,
            finish: start + seconds,
        });
    }
    write_manifest(&out.join("manifest.jsonl"), &utterances)?;
    super::load_manifest(&out.join("manifest.jsonl"))
}

/// In-memory corpus with the full-size session layout: 3838 utterances in
/// sessions 1-4 and 1098 in session 5, two speakers per session. No files.
pub fn simulated_corpus(seed: u64) -> Corpus {
    const PER_SESSION: [usize; 5] = [960, 960, 959, 959, 1098];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut utterances = Vec::new();
    for (s, &count) in PER_SESSION.iter().enumerate() {
        let session = s as u8 + 1;
        for k in 0..count {
            let speaker = format!("Ses{session:02}{}", if rng.gen_bool(0.5) { 'F' } else { 'M' });
            utterances.push(Utterance {
                id: format!("{speaker}_{k:05}"),
                session,
                speaker,
                label: Some(Emotion::ALL[rng.gen_range(0..4)]),
                votes: vec![],
                wav: None,
                transcript: String::new(),
                mocap: MocapPaths::default(),
                start: 0.0,
                finish: 1.0,
            });
        }
    }
    Corpus {
        utterances,
        ..Corpus::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_signal_classes_are_identified_jointly() {
        for c in Emotion::ALL {
            let key = (high_arousal(c), negative_valence(c));
            let same: Vec<_> = Emotion::ALL
                .into_iter()
                .filter(|&d| (high_arousal(d), negative_valence(d)) == key)
                .collect();
            assert_eq!(same, vec![c]);
        }
    }

    #[test]
    fn votes_always_pass_the_filter() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for c in Emotion::ALL {
            for _ in 0..50 {
                assert_eq!(super::super::filter_labels(&votes(&mut rng, c)).label(), Some(c));
            }
        }
    }

    #[test]
    fn simulated_layout() {
        let c = simulated_corpus(0);
        assert_eq!(c.utterances.len(), 4936);
        assert_eq!(c.utterances.iter().filter(|u| u.session == 5).count(), 1098);
    }
}
