//! Procedural tactile conversations.
//!
//! Each sample draws a latent vector over eight physical properties; four
//! interaction characteristics are derived from it. Frames are textures
//! whose statistics encode the latents, and every question/answer is
//! rendered from a paraphrase grammar keyed on the latent bands, so answers
//! are consistent with the clip by construction.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::sample::{ConversationSample, Provenance, Task};
use crate::error::{Error, Result};
use crate::frontend::{Sensor, TactileClip, CHANNELS};
use crate::rng::Rng;

pub const PHYSICAL: [&str; 8] = [
    "material",
    "elasticity",
    "roughness",
    "mass",
    "hardness",
    "sharpness",
    "texture",
    "bumpiness",
];

pub const INTERACTIVE: [&str; 4] = ["graspability", "prickliness", "bendability", "malleability"];

/// Low / mid / high descriptor per property.
const DESCRIPTORS: [(&str, [&str; 3]); 12] = [
    ("material", ["fabric-like", "plastic-like", "metallic"]),
    ("elasticity", ["rigid", "somewhat springy", "highly elastic"]),
    ("roughness", ["smooth", "slightly rough", "very rough"]),
    ("mass", ["light", "moderately heavy", "heavy"]),
    ("hardness", ["soft", "moderately firm", "very hard"]),
    ("sharpness", ["blunt", "slightly pointed", "sharp"]),
    ("texture", ["uniform", "finely patterned", "coarsely patterned"]),
    ("bumpiness", ["flat", "slightly bumpy", "very bumpy"]),
    ("graspability", ["hard to grip", "fairly easy to grip", "easy to grip"]),
    ("prickliness", ["not prickly", "a little prickly", "very prickly"]),
    ("bendability", ["stiff", "somewhat bendable", "easily bendable"]),
    ("malleability", ["not malleable", "somewhat malleable", "very malleable"]),
];

/// Physical property that explains each interaction characteristic.
const REASONS: [(&str, &str); 4] = [
    ("graspability", "roughness"),
    ("prickliness", "sharpness"),
    ("bendability", "hardness"),
    ("malleability", "hardness"),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Band {
    Low,
    Mid,
    High,
}

pub fn band(value: f64) -> Band {
    if value < 1.0 / 3.0 {
        Band::Low
    } else if value < 2.0 / 3.0 {
        Band::Mid
    } else {
        Band::High
    }
}

pub fn descriptors(property: &str) -> Option<[&'static str; 3]> {
    DESCRIPTORS.iter().find(|(p, _)| *p == property).map(|(_, d)| *d)
}

pub fn descriptor(property: &str, value: f64) -> &'static str {
    let d = descriptors(property).expect("known property");
    d[band(value) as usize]
}

/// Commonsense scenario: a yes/no question decided by one property band.
struct Scenario {
    question: &'static str,
    property: &'static str,
    yes_when: &'static [Band],
}

const SCENARIOS: [Scenario; 6] = [
    Scenario { question: "Could this object be used to hammer a nail ?", property: "hardness", yes_when: &[Band::High] },
    Scenario { question: "Would this object be comfortable to sit on ?", property: "hardness", yes_when: &[Band::Low] },
    Scenario { question: "Is it safe to hold this object with bare hands ?", property: "sharpness", yes_when: &[Band::Low, Band::Mid] },
    Scenario { question: "Could this object be folded to fit in a pocket ?", property: "bendability", yes_when: &[Band::High] },
    Scenario { question: "Would this object make a good non-slip handle ?", property: "roughness", yes_when: &[Band::Mid, Band::High] },
    Scenario { question: "Would a child find this object easy to carry ?", property: "mass", yes_when: &[Band::Low] },
];

const FPU_QUESTIONS: [&str; 4] = [
    "What can you tell about the {p} of this object ?",
    "How would you describe its {p} ?",
    "Describe the {p} you perceive .",
    "What is the {p} of what you are touching ?",
];

const FPU_ANSWERS: [&str; 5] = [
    "The object feels {d} .",
    "Its {p} is {d} .",
    "It is {d} to the touch .",
    "Touching it , I would say it is {d} .",
    "The {p} suggests it is {d} .",
];

const TIP_QUESTIONS: [&str; 3] = [
    "What would you notice about its {p} when handling it ?",
    "How does this object behave in terms of {p} ?",
    "When you interact with it , what is its {p} like ?",
];

const TIP_ANSWERS: [&str; 5] = [
    "It is {d} because it feels {r} .",
    "When handled it is {d} , since it is {r} .",
    "It would be {d} in your hand as it is {r} .",
    "Being {r} , it is {d} .",
    "Its {p} is {d} because the surface is {r} .",
];

const CDR_YES: [&str; 4] = [
    "Yes , because it is {d} .",
    "Yes . It feels {d} , so it works well .",
    "Yes , it is {d} enough for that .",
    "Yes , since the object is {d} .",
];

const CDR_NO: [&str; 4] = [
    "No , because it is {d} .",
    "No . It feels {d} , so it is not suitable .",
    "No , it is {d} , which does not suit that .",
    "No , since the object is {d} .",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskCounts {
    pub fpu: usize,
    pub tip: usize,
    pub cdr: usize,
}

impl TaskCounts {
    /// Splits `total` 50/30/20 by largest remainder.
    pub fn from_total(total: usize) -> Self {
        let ratios = [0.5, 0.3, 0.2];
        let raw: Vec<f64> = ratios.iter().map(|r| r * total as f64).collect();
        let mut counts: Vec<usize> = raw.iter().map(|x| x.floor() as usize).collect();
        let mut rest = total - counts.iter().sum::<usize>();
        let mut order: Vec<usize> = (0..3).collect();
        order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())).then(a.cmp(&b)));
        for &i in order.iter().cycle() {
            if rest == 0 {
                break;
            }
            counts[i] += 1;
            rest -= 1;
        }
        TaskCounts { fpu: counts[0], tip: counts[1], cdr: counts[2] }
    }

    pub fn total(&self) -> usize {
        self.fpu + self.tip + self.cdr
    }

    pub fn get(&self, task: Task) -> usize {
        match task {
            Task::Fpu => self.fpu,
            Task::Tip => self.tip,
            Task::Cdr => self.cdr,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextureParams {
    /// Per-pixel noise amplitude at roughness 1.
    pub noise_amplitude: f64,
    /// Most blobs per frame, reached at bumpiness 1.
    pub max_blobs: usize,
    /// Blob radius as a fraction of the frame side.
    pub blob_radius: f64,
    /// Highest stripe frequency (cycles per frame), reached at texture 1.
    pub max_stripe_frequency: f64,
}

impl Default for TextureParams {
    fn default() -> Self {
        TextureParams {
            noise_amplitude: 0.2,
            max_blobs: 12,
            blob_radius: 0.08,
            max_stripe_frequency: 6.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorSpec {
    pub seed: u64,
    pub counts: TaskCounts,
    /// Frame side in pixels, a multiple of 14.
    pub frame_size: usize,
    /// Inclusive range of frames per clip.
    pub frames: [usize; 2],
    /// Per-property `[lo, hi]` sampling range; missing properties use [0, 1].
    pub latent_ranges: BTreeMap<String, [f64; 2]>,
    pub texture: TextureParams,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            seed: 0,
            counts: TaskCounts::from_total(600),
            frame_size: 56,
            frames: [1, 4],
            latent_ranges: BTreeMap::new(),
            texture: TextureParams::default(),
        }
    }
}

impl GeneratorSpec {
    pub fn new(seed: u64, counts: TaskCounts) -> Self {
        GeneratorSpec { seed, counts, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: String| Err(Error::Config { field: field.into(), message });
        for task in Task::ALL {
            if self.counts.get(task) == 0 {
                return bad("counts", format!("task {task} needs at least one sample"));
            }
        }
        if self.frame_size == 0 || self.frame_size % 14 != 0 {
            return bad("frame_size", format!("{} is not a positive multiple of 14", self.frame_size));
        }
        let [lo, hi] = self.frames;
        if lo == 0 || lo > hi || hi > 8 {
            return bad("frames", format!("[{lo}, {hi}] must satisfy 1 <= lo <= hi <= 8"));
        }
        for (name, [a, b]) in &self.latent_ranges {
            if !PHYSICAL.contains(&name.as_str()) {
                return bad("latent_ranges", format!("unknown property `{name}`"));
            }
            if !(0.0..=1.0).contains(a) || !(0.0..=1.0).contains(b) || a > b {
                return bad("latent_ranges", format!("`{name}` range [{a}, {b}] must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    fn range(&self, property: &str) -> [f64; 2] {
        self.latent_ranges.get(property).copied().unwrap_or([0.0, 1.0])
    }
}

/// Interaction characteristics implied by the physical latents.
pub fn derive_interactive(latents: &mut BTreeMap<String, f64>) {
    let g = |k: &str| latents[k];
    let clamp = |x: f64| x.clamp(0.0, 1.0);
    let grasp = clamp(0.6 * g("roughness") + 0.4 * (1.0 - g("mass")));
    let prick = clamp(0.8 * g("sharpness") + 0.2 * g("roughness"));
    let bend = clamp(0.7 * (1.0 - g("hardness")) + 0.3 * g("elasticity"));
    let mall = clamp(0.6 * (1.0 - g("hardness")) + 0.4 * (1.0 - g("elasticity")));
    latents.insert("graspability".into(), grasp);
    latents.insert("prickliness".into(), prick);
    latents.insert("bendability".into(), bend);
    latents.insert("malleability".into(), mall);
}

pub fn generate_synthetic(spec: &GeneratorSpec) -> Result<Vec<ConversationSample>> {
    spec.validate()?;
    let root = Rng::new(spec.seed);
    let mut tasks: Vec<Task> = Task::ALL
        .iter()
        .flat_map(|&t| std::iter::repeat_n(t, spec.counts.get(t)))
        .collect();
    root.split_named("task-order").shuffle(&mut tasks);
    tasks
        .iter()
        .enumerate()
        .map(|(i, &task)| {
            let mut rng = root.split(i as u64);
            let mut latents = BTreeMap::new();
            for p in PHYSICAL {
                let [lo, hi] = spec.range(p);
                latents.insert(p.to_string(), rng.uniform_range(lo, hi));
            }
            derive_interactive(&mut latents);
            generate_sample(spec, format!("syn-{}-{i:05}", spec.seed), task, latents, &mut rng)
        })
        .collect()
}

/// Renders one sample for fixed latents (physical and interactive).
pub fn generate_sample(
    spec: &GeneratorSpec,
    id: String,
    task: Task,
    latents: BTreeMap<String, f64>,
    rng: &mut Rng,
) -> Result<ConversationSample> {
    let [lo, hi] = spec.frames;
    let n = lo + rng.below(hi - lo + 1);
    let sensor = if rng.below(2) == 0 { Sensor::GelSight } else { Sensor::GelSightMini };
    let frames = render_frames(spec, &latents, n, &mut rng.split_named("frames"));
    let tactile = TactileClip::new(frames, n, spec.frame_size, spec.frame_size, sensor)?;
    let (question, answers, properties) = render_text(task, &latents, rng);
    Ok(ConversationSample {
        id,
        tactile,
        question,
        answers,
        task,
        properties,
        provenance: Provenance::Synthetic,
        latents,
    })
}

fn pick_distinct(rng: &mut Rng, n_templates: usize, count: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n_templates).collect();
    rng.shuffle(&mut idx);
    idx.truncate(count);
    idx
}

fn render_text(task: Task, latents: &BTreeMap<String, f64>, rng: &mut Rng) -> (String, Vec<String>, Vec<String>) {
    let n_answers = 3 + rng.below(3);
    match task {
        Task::Fpu => {
            let p = *rng.choose(&PHYSICAL);
            let d = descriptor(p, latents[p]);
            let q = rng.choose(&FPU_QUESTIONS).replace("{p}", p);
            let answers = pick_distinct(rng, FPU_ANSWERS.len(), n_answers)
                .into_iter()
                .map(|i| FPU_ANSWERS[i].replace("{p}", p).replace("{d}", d))
                .collect();
            (q, answers, vec![p.to_string()])
        }
        Task::Tip => {
            let p = *rng.choose(&INTERACTIVE);
            let r = REASONS.iter().find(|(k, _)| *k == p).map(|(_, r)| *r).unwrap();
            let d = descriptor(p, latents[p]);
            let rd = descriptor(r, latents[r]);
            let q = rng.choose(&TIP_QUESTIONS).replace("{p}", p);
            let answers = pick_distinct(rng, TIP_ANSWERS.len(), n_answers)
                .into_iter()
                .map(|i| TIP_ANSWERS[i].replace("{p}", p).replace("{d}", d).replace("{r}", rd))
                .collect();
            (q, answers, vec![p.to_string(), r.to_string()])
        }
        Task::Cdr => {
            let s = &SCENARIOS[rng.below(SCENARIOS.len())];
            let v = latents[s.property];
            let d = descriptor(s.property, v);
            let templates: &[&str] = if s.yes_when.contains(&band(v)) { &CDR_YES } else { &CDR_NO };
            let answers = pick_distinct(rng, templates.len(), n_answers.min(templates.len()))
                .into_iter()
                .map(|i| templates[i].replace("{d}", d))
                .collect();
            (s.question.to_string(), answers, vec![s.property.to_string()])
        }
    }
}

/// Whether every answer states the descriptor of the latent band for each
/// property the sample is about, and no other band's descriptor.
pub fn answers_entailed(sample: &ConversationSample) -> bool {
    sample.properties.iter().all(|p| {
        let Some(all) = descriptors(p) else { return false };
        let Some(&v) = sample.latents.get(p) else { return false };
        let expected = descriptor(p, v);
        sample.answers.iter().all(|a| {
            has_phrase(a, expected)
                && all.iter().filter(|d| **d != expected).all(|d| !has_phrase(a, d) || has_phrase(expected, d))
        })
    })
}

/// Whole-word phrase containment.
fn has_phrase(text: &str, phrase: &str) -> bool {
    let words: Vec<&str> = text.split_whitespace().collect();
    let needle: Vec<&str> = phrase.split_whitespace().collect();
    !needle.is_empty() && words.windows(needle.len()).any(|w| w == needle.as_slice())
}

/// Expected yes/no conclusion for a commonsense question, if it is one of
/// the generator's scenarios.
pub fn scenario_conclusion(question: &str, latents: &BTreeMap<String, f64>) -> Option<bool> {
    let s = SCENARIOS.iter().find(|s| s.question == question)?;
    Some(s.yes_when.contains(&band(*latents.get(s.property)?)))
}

fn render_frames(spec: &GeneratorSpec, latents: &BTreeMap<String, f64>, n: usize, rng: &mut Rng) -> Vec<f64> {
    let size = spec.frame_size;
    let tex = &spec.texture;
    let l = |k: &str| latents[k];
    let contrast = 0.15 + 0.35 * l("hardness");
    let noise = tex.noise_amplitude * l("roughness");
    let blobs = 1 + (l("bumpiness") * tex.max_blobs as f64).round() as usize;
    let freq = 1.0 + (tex.max_stripe_frequency - 1.0) * l("texture");
    let angle = rng.uniform() * std::f64::consts::PI;
    let ridge = l("sharpness");
    let means = [
        0.25 + 0.25 * l("hardness") + 0.15 * l("material"),
        0.25 + 0.25 * l("roughness") + 0.15 * l("mass"),
        0.25 + 0.25 * l("bumpiness") + 0.15 * l("elasticity"),
    ];
    let centers: Vec<(f64, f64)> = (0..blobs).map(|_| (rng.uniform(), rng.uniform())).collect();
    let radius = tex.blob_radius;
    let mut out = Vec::with_capacity(n * size * size * CHANNELS);
    for f in 0..n {
        // Contact deepens over the clip; elastic objects rebound more.
        let press = if n == 1 { 1.0 } else { 0.7 + 0.3 * f as f64 / (n - 1) as f64 };
        let depth = press * (1.0 - 0.3 * l("elasticity") * (f % 2) as f64);
        for y in 0..size {
            for x in 0..size {
                let (u, v) = (x as f64 / size as f64, y as f64 / size as f64);
                let stripes = (2.0 * std::f64::consts::PI * freq * (u * angle.cos() + v * angle.sin())).sin();
                let bump: f64 = centers
                    .iter()
                    .map(|(cx, cy)| (-((u - cx).powi(2) + (v - cy).powi(2)) / (2.0 * radius * radius)).exp())
                    .sum::<f64>()
                    .min(1.0);
                let edge = ridge * (-((u - 0.5).abs() * 40.0)).exp();
                let pattern = contrast * depth * (0.5 * stripes + bump - 0.5) + 0.3 * edge;
                for c in 0..CHANNELS {
                    let jitter = noise * (2.0 * rng.uniform() - 1.0);
                    let value = (means[c] + pattern * (1.0 - 0.2 * c as f64) + jitter).clamp(0.0, 1.0);
                    out.push(f64::from(value as f32));
                }
            }
        }
    }
    out
}
