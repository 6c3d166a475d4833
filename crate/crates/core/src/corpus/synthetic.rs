//! Seeded generators for format-compatible synthetic corpora.
//!
//! [`synthetic_corpus`] composes sentences from small per-type lexicons, so
//! the text is learnable and contains genuine nesting (a body part inside a
//! symptom or disease). [`random_record`] produces arbitrary spans over
//! random characters for property tests.

use std::collections::HashSet;

use rand::seq::IndexedRandom;
use rand::Rng;

use super::types::{EntityAnnotation, EntityType, SentenceRecord};
use crate::diffcore::rng::stream;

const BOD: &[&str] = &["肺", "心脏", "肝脏", "皮肤", "胃", "肾", "咽部", "关节", "神经", "细胞"];
const DIS: &[&str] = &["肺炎", "贫血", "肝炎", "哮喘", "糖尿病", "感染"];
const SYM: &[&str] = &["发热", "咳嗽", "呕吐", "头痛", "乏力", "皮疹"];
const PRO: &[&str] = &["手术", "穿刺", "心电图", "切片", "透析"];
const EQU: &[&str] = &["导管", "呼吸机", "支架", "监护仪"];
const DRU: &[&str] = &["阿司匹林", "青霉素", "疫苗", "胰岛素"];
const ITE: &[&str] = &["血常规", "尿常规", "血糖", "体温"];
const DEP: &[&str] = &["儿科", "内科", "外科"];
const MIC: &[&str] = &["病毒", "细菌", "真菌", "支原体"];
const FILLER: &[&str] = &["患者", "可见", "出现", "伴有", "的", "和", "，", "经", "后", "给予"];
/// Suffixes turning a body part into a symptom or disease span.
const SYM_SUFFIX: &[&str] = &["疼痛", "肿胀", "出血", "异常"];
const DIS_SUFFIX: &[&str] = &["损伤", "肿瘤", "病变"];

fn lexicon(t: EntityType) -> &'static [&'static str] {
    match t {
        EntityType::Bod => BOD,
        EntityType::Dis => DIS,
        EntityType::Sym => SYM,
        EntityType::Pro => PRO,
        EntityType::Equ => EQU,
        EntityType::Dru => DRU,
        EntityType::Ite => ITE,
        EntityType::Dep => DEP,
        EntityType::Mic => MIC,
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SyntheticOptions {
    pub records: usize,
    /// Upper bound on segments (entities or filler words) per sentence.
    pub max_segments: usize,
    /// Probability that an entity segment is a composite with a nested
    /// body-part entity.
    pub nest_prob: f64,
}

impl Default for SyntheticOptions {
    fn default() -> Self {
        SyntheticOptions {
            records: 50,
            max_segments: 6,
            nest_prob: 0.3,
        }
    }
}

struct Builder {
    chars: Vec<char>,
    entities: Vec<EntityAnnotation>,
}

impl Builder {
    fn push(&mut self, word: &str) -> (usize, usize) {
        let start = self.chars.len();
        self.chars.extend(word.chars());
        (start, self.chars.len() - 1)
    }

    fn annotate(&mut self, start: usize, end: usize, t: EntityType) {
        let surface: String = self.chars[start..=end].iter().collect();
        self.entities.push(EntityAnnotation::new(start, end, t, surface));
    }
}

pub fn synthetic_corpus(seed: u64, opts: &SyntheticOptions) -> Vec<SentenceRecord> {
    let mut rng = stream(seed, "synthetic-corpus");
    (0..opts.records)
        .map(|_| {
            let mut b = Builder {
                chars: Vec::new(),
                entities: Vec::new(),
            };
            let segments = rng.random_range(2..=opts.max_segments.max(2));
            for _ in 0..segments {
                if rng.random_bool(0.35) {
                    b.push(FILLER.choose(&mut rng).unwrap());
                    continue;
                }
                if rng.random_bool(opts.nest_prob.clamp(0.0, 1.0)) {
                    let (outer, suffixes) = if rng.random_bool(0.5) {
                        (EntityType::Sym, SYM_SUFFIX)
                    } else {
                        (EntityType::Dis, DIS_SUFFIX)
                    };
                    let (s, e) = b.push(BOD.choose(&mut rng).unwrap());
                    b.annotate(s, e, EntityType::Bod);
                    let (_, e2) = b.push(suffixes.choose(&mut rng).unwrap());
                    b.annotate(s, e2, outer);
                } else {
                    let t = *EntityType::ALL.choose(&mut rng).unwrap();
                    let (s, e) = b.push(lexicon(t).choose(&mut rng).unwrap());
                    b.annotate(s, e, t);
                }
            }
            b.push("。");
            SentenceRecord::new(b.chars.iter().collect::<String>(), b.entities)
        })
        .collect()
}

/// A record of random characters with up to `max_entities` arbitrary
/// (possibly overlapping or nested) distinct typed spans.
pub fn random_record<R: Rng>(rng: &mut R, max_chars: usize, max_entities: usize) -> SentenceRecord {
    const ALPHABET: &[char] = &['甲', '乙', '丙', '丁', '戊', '己', '庚', '辛', 'a', 'b', '1', '，'];
    let n = rng.random_range(1..=max_chars.max(1));
    let chars: Vec<char> = (0..n).map(|_| *ALPHABET.choose(rng).unwrap()).collect();
    let mut seen = HashSet::new();
    let mut entities = Vec::new();
    for _ in 0..rng.random_range(0..=max_entities) {
        let start = rng.random_range(0..n);
        let end = rng.random_range(start..n);
        let t = *EntityType::ALL.choose(rng).unwrap();
        if seen.insert((start, end, t)) {
            let surface: String = chars[start..=end].iter().collect();
            entities.push(EntityAnnotation::new(start, end, t, surface));
        }
    }
    SentenceRecord::new(chars.into_iter().collect::<String>(), entities)
}
