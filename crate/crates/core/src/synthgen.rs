//! Seeded synthetic grounding scenes and commands.
//!
//! Each sample is a handful of boxed "objects" with category/color one-hot
//! features (plus optional noise) and a templated command — "ACTION the
//! ORDINAL COLOR CATEGORY POSITION" — guaranteed by brute-force check to
//! pick out exactly one region. Commands need more than the category to
//! resolve: every scene plants same-category distractors.

use crate::error::{Error, Result};
use crate::grounding::{iou, Box2D};
use crate::parallel::{map_indexed, ExecMode};
use crate::rng::{splitmix64_at, Rng64};
use crate::sample::{CommandTokens, GroundingSample, RegionProposal};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;
use std::sync::OnceLock;

pub const GRAMMAR_VERSION: u32 = 1;
pub const DATASET_FORMAT_VERSION: u32 = 1;
/// Longest emitted command: 3-word action + "the" + ordinal + color +
/// category + 3-word position.
pub const MAX_COMMAND_TOKENS: usize = 10;

pub const CATEGORIES: [&str; 8] =
    ["car", "truck", "van", "bus", "bike", "scooter", "trailer", "cart"];
pub const COLORS: [&str; 6] = ["red", "blue", "green", "white", "black", "yellow"];
const ORDINALS: [&str; 12] = [
    "first", "second", "third", "fourth", "fifth", "sixth", "seventh", "eighth", "ninth",
    "tenth", "eleventh", "twelfth",
];
const ACTIONS: [&[&str]; 12] = [
    &["move", "to"],
    &["stop", "near"],
    &["park", "beside"],
    &["drive", "toward"],
    &["head", "for"],
    &["pull", "up", "at"],
    &["go", "around"],
    &["wait", "behind"],
    &["swing", "by"],
    &["roll", "past"],
    &["slow", "down", "near"],
    &["turn", "toward"],
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Position {
    Left,
    Right,
    Middle,
    UpAhead,
}

impl Position {
    pub const ALL: [Position; 4] =
        [Position::Left, Position::Right, Position::Middle, Position::UpAhead];

    pub fn phrase(&self) -> &'static [&'static str] {
        match self {
            Position::Left => &["on", "the", "left"],
            Position::Right => &["on", "the", "right"],
            Position::Middle => &["in", "the", "middle"],
            Position::UpAhead => &["up", "ahead"],
        }
    }

    pub fn matches(&self, b: &Box2D) -> bool {
        let (cx, cy) = b.center();
        match self {
            Position::Left => cx < 1.0 / 3.0,
            Position::Right => cx > 2.0 / 3.0,
            Position::Middle => (1.0 / 3.0..=2.0 / 3.0).contains(&cx),
            Position::UpAhead => cy < 0.5,
        }
    }
}

/// Fixed command vocabulary; token ids index into this list.
pub fn vocab() -> &'static [&'static str] {
    static VOCAB: OnceLock<Vec<&'static str>> = OnceLock::new();
    VOCAB.get_or_init(|| {
        let mut words: Vec<&'static str> = vec!["the"];
        let mut push = |w: &'static str| {
            if !words.contains(&w) {
                words.push(w);
            }
        };
        for phrase in ACTIONS {
            phrase.iter().for_each(|w| push(w));
        }
        ORDINALS.iter().for_each(|w| push(w));
        COLORS.iter().for_each(|w| push(w));
        CATEGORIES.iter().for_each(|w| push(w));
        for p in Position::ALL {
            p.phrase().iter().for_each(|w| push(w));
        }
        words
    })
}

fn word_id(word: &str) -> Result<usize> {
    vocab()
        .iter()
        .position(|&w| w == word)
        .ok_or_else(|| Error::InvalidConfig(format!("word {word:?} not in vocabulary")))
}

/// Knobs of the scene generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub n_regions_min: usize,
    pub n_regions_max: usize,
    pub categories: Vec<String>,
    pub colors: Vec<String>,
    /// Minimum count of non-target regions sharing the target's category.
    pub distractor_policy: usize,
    pub noise_sigma: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            n_regions_min: 6,
            n_regions_max: 12,
            categories: CATEGORIES.iter().map(|s| s.to_string()).collect(),
            colors: COLORS.iter().map(|s| s.to_string()).collect(),
            distractor_policy: 2,
            noise_sigma: 0.1,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.categories.len() < 2 || self.colors.len() < 2 {
            return Err(Error::InvalidConfig(
                "scene spec needs at least 2 categories and 2 colors".into(),
            ));
        }
        for c in &self.categories {
            if !CATEGORIES.contains(&c.as_str()) {
                return Err(Error::InvalidConfig(format!("unknown category {c:?}")));
            }
        }
        for c in &self.colors {
            if !COLORS.contains(&c.as_str()) {
                return Err(Error::InvalidConfig(format!("unknown color {c:?}")));
            }
        }
        if self.n_regions_min < 1 || self.n_regions_min > self.n_regions_max {
            return Err(Error::InvalidConfig(format!(
                "region count range [{}, {}] invalid",
                self.n_regions_min, self.n_regions_max
            )));
        }
        if self.distractor_policy >= self.n_regions_min {
            return Err(Error::InvalidConfig(format!(
                "distractor_policy {} must stay below n_regions_min {}",
                self.distractor_policy, self.n_regions_min
            )));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "noise_sigma {} invalid",
                self.noise_sigma
            )));
        }
        Ok(())
    }

    /// one-hot(category) ++ one-hot(color)
    pub fn feature_dim(&self) -> usize {
        self.categories.len() + self.colors.len()
    }
}

/// Ground-truth attributes behind a region's (noisy) features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionAttrs {
    pub category: usize,
    pub color: usize,
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub regions: Vec<RegionProposal>,
    pub attrs: Vec<RegionAttrs>,
    pub target_index: usize,
}

const BOX_TRIES: usize = 200;
const RENDER_RETRIES: usize = 64;
const SCENE_RETRIES: usize = 8;
const MAX_PAIRWISE_IOU: f64 = 0.7;

fn place_boxes(n: usize, rng: &mut Rng64) -> Result<Vec<Box2D>> {
    let mut boxes: Vec<Box2D> = Vec::with_capacity(n);
    for _ in 0..n {
        let mut placed = false;
        for _ in 0..BOX_TRIES {
            let w = rng.range(0.08, 0.20);
            let h = rng.range(0.08, 0.20);
            let x1 = rng.range(0.0, 1.0 - w);
            let y1 = rng.range(0.0, 1.0 - h);
            let b = Box2D::new(x1, y1, x1 + w, y1 + h)?;
            let ok = boxes.iter().try_fold(true, |acc, prev| {
                iou(prev, &b).map(|v| acc && v <= MAX_PAIRWISE_IOU)
            })?;
            if ok {
                boxes.push(b);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::InfeasibleScene(format!(
                "could not place {n} boxes under the overlap cap"
            )));
        }
    }
    Ok(boxes)
}

/// Samples a scene: boxes with bounded pairwise overlap, attributes with
/// the distractor guarantee, and noisy one-hot features.
pub fn generate_scene(spec: &SceneSpec, rng: &mut Rng64) -> Result<Scene> {
    spec.validate()?;
    let n = rng.range_usize(spec.n_regions_min, spec.n_regions_max);
    let n_cat = spec.categories.len();
    let n_col = spec.colors.len();

    let target_cat = rng.below(n_cat);
    let mut attrs: Vec<RegionAttrs> = Vec::with_capacity(n);
    // Slot 0 is the target; the next distractor_policy slots share its
    // category; the rest are free. A joint shuffle hides the construction.
    attrs.push(RegionAttrs { category: target_cat, color: rng.below(n_col) });
    for _ in 0..spec.distractor_policy {
        attrs.push(RegionAttrs { category: target_cat, color: rng.below(n_col) });
    }
    while attrs.len() < n {
        attrs.push(RegionAttrs { category: rng.below(n_cat), color: rng.below(n_col) });
    }
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let attrs: Vec<RegionAttrs> = order.iter().map(|&i| attrs[i]).collect();
    let target_index = order.iter().position(|&i| i == 0).unwrap();

    let boxes = place_boxes(n, rng)?;
    let dim = spec.feature_dim();
    let regions = boxes
        .into_iter()
        .zip(&attrs)
        .map(|(bbox, a)| {
            let mut features = vec![0.0; dim];
            features[a.category] = 1.0;
            features[n_cat + a.color] = 1.0;
            if spec.noise_sigma > 0.0 {
                for f in &mut features {
                    *f += spec.noise_sigma * rng.normal();
                }
            }
            RegionProposal { bbox, features }
        })
        .collect();

    Ok(Scene { regions, attrs, target_index })
}

/// A command's logical form. The ordinal, when present, ranks the regions
/// matching the rest of the predicate left-to-right by box center.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Predicate {
    pub category: usize,
    pub color: Option<usize>,
    pub position: Option<Position>,
    pub ordinal: Option<usize>, // 1-based rank
}

/// Brute-force evaluation: indices of all regions the predicate selects.
pub fn eval_predicate(
    regions: &[RegionProposal],
    attrs: &[RegionAttrs],
    pred: &Predicate,
) -> Vec<usize> {
    let mut matches: Vec<usize> = (0..regions.len())
        .filter(|&i| {
            attrs[i].category == pred.category
                && pred.color.is_none_or(|c| attrs[i].color == c)
                && pred.position.is_none_or(|p| p.matches(&regions[i].bbox))
        })
        .collect();
    if let Some(k) = pred.ordinal {
        matches.sort_by(|&a, &b| {
            let ca = regions[a].bbox.center().0;
            let cb = regions[b].bbox.center().0;
            ca.partial_cmp(&cb).unwrap().then(a.cmp(&b))
        });
        return match matches.get(k - 1) {
            Some(&i) => vec![i],
            None => vec![],
        };
    }
    matches
}

fn tokens_for(pred: &Predicate, spec: &SceneSpec, action: &[&str]) -> Result<CommandTokens> {
    let mut words: Vec<&str> = action.to_vec();
    words.push("the");
    if let Some(k) = pred.ordinal {
        words.push(ORDINALS[k - 1]);
    }
    if let Some(c) = pred.color {
        words.push(&spec.colors[c]);
    }
    words.push(&spec.categories[pred.category]);
    if let Some(p) = pred.position {
        words.extend_from_slice(p.phrase());
    }
    let ids = words.iter().map(|w| word_id(w)).collect::<Result<Vec<_>>>()?;
    debug_assert!(ids.len() <= MAX_COMMAND_TOKENS);
    Ok(CommandTokens { ids })
}

/// Renders a command that uniquely picks `target`, verified by brute force.
pub fn render_command(
    scene: &Scene,
    target: usize,
    spec: &SceneSpec,
    rng: &mut Rng64,
) -> Result<CommandTokens> {
    if target >= scene.regions.len() {
        return Err(Error::InvalidSample(format!(
            "target {target} outside scene of {} regions",
            scene.regions.len()
        )));
    }
    let t_attrs = scene.attrs[target];
    let t_box = &scene.regions[target].bbox;
    let applicable: Vec<Position> =
        Position::ALL.into_iter().filter(|p| p.matches(t_box)).collect();

    for _ in 0..RENDER_RETRIES {
        let action = ACTIONS[rng.below(ACTIONS.len())];
        let color = (rng.uniform() >= 0.25).then_some(t_attrs.color);
        let position =
            (rng.uniform() >= 0.25).then(|| applicable[rng.below(applicable.len())]);
        let mut pred = Predicate {
            category: t_attrs.category,
            color,
            position,
            ordinal: None,
        };
        let base = eval_predicate(&scene.regions, &scene.attrs, &pred);
        if base.len() > 1 {
            let mut ranked = base.clone();
            ranked.sort_by(|&a, &b| {
                let ca = scene.regions[a].bbox.center().0;
                let cb = scene.regions[b].bbox.center().0;
                ca.partial_cmp(&cb).unwrap().then(a.cmp(&b))
            });
            let rank = ranked.iter().position(|&i| i == target).unwrap() + 1;
            if rank > ORDINALS.len() {
                continue;
            }
            pred.ordinal = Some(rank);
        }
        // Independent confirmation that exactly the target survives.
        if eval_predicate(&scene.regions, &scene.attrs, &pred) == [target] {
            return tokens_for(&pred, spec, action);
        }
    }
    Err(Error::NoUniqueCommand { retries: RENDER_RETRIES })
}

/// Re-parses an emitted command back into its predicate (the offline
/// verification path).
pub fn parse_command(tokens: &CommandTokens, spec: &SceneSpec) -> Result<Predicate> {
    let v = vocab();
    let words: Vec<&str> = tokens
        .ids
        .iter()
        .map(|&id| {
            v.get(id)
                .copied()
                .ok_or_else(|| Error::InvalidSample(format!("token id {id} out of vocab")))
        })
        .collect::<Result<Vec<_>>>()?;
    let the = words
        .iter()
        .position(|&w| w == "the")
        .ok_or_else(|| Error::InvalidSample("command lacks determiner".into()))?;
    let mut rest = &words[the + 1..];

    let mut ordinal = None;
    if let [head, tail @ ..] = rest {
        if let Some(k) = ORDINALS.iter().position(|o| o == head) {
            ordinal = Some(k + 1);
            rest = tail;
        }
    }
    let mut color = None;
    if let [head, tail @ ..] = rest {
        if let Some(c) = spec.colors.iter().position(|x| x == head) {
            color = Some(c);
            rest = tail;
        }
    }
    let [head, tail @ ..] = rest else {
        return Err(Error::InvalidSample("command lacks category".into()));
    };
    let category = spec
        .categories
        .iter()
        .position(|x| x == head)
        .ok_or_else(|| Error::InvalidSample(format!("unknown category word {head:?}")))?;
    let position = if tail.is_empty() {
        None
    } else {
        Some(
            Position::ALL
                .into_iter()
                .find(|p| p.phrase() == tail)
                .ok_or_else(|| Error::InvalidSample(format!("bad position phrase {tail:?}")))?,
        )
    };
    Ok(Predicate { category, color, position, ordinal })
}

/// Generates sample `index` of a dataset. Every sample derives its own rng
/// stream from (dataset seed, index), so generation is order-independent.
pub fn generate_sample(spec: &SceneSpec, index: u64, dataset_seed: u64) -> Result<GroundingSample> {
    spec.validate()?;
    let sample_seed = splitmix64_at(dataset_seed, index);
    let mut rng = Rng64::seed_from_u64(sample_seed);
    let mut last = None;
    for _ in 0..SCENE_RETRIES {
        let attempt = generate_scene(spec, &mut rng).and_then(|scene| {
            let command = render_command(&scene, scene.target_index, spec, &mut rng)?;
            Ok(GroundingSample {
                id: index,
                regions: scene.regions,
                command,
                target_index: scene.target_index,
                seed: sample_seed,
            })
        });
        match attempt {
            Ok(sample) => return Ok(sample),
            Err(e @ (Error::NoUniqueCommand { .. } | Error::InfeasibleScene(_))) => {
                last = Some(e);
            }
            Err(e) => return Err(e),
        }
    }
    Err(last.unwrap())
}

/// First line of every dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format_version: u32,
    pub grammar_version: u32,
    pub vocab: Vec<String>,
    pub templates: Vec<String>,
    pub spec: SceneSpec,
}

impl DatasetHeader {
    pub fn current(spec: &SceneSpec) -> Self {
        let actions = ACTIONS
            .iter()
            .map(|p| p.join(" "))
            .collect::<Vec<_>>()
            .join(" | ");
        let positions = Position::ALL
            .iter()
            .map(|p| p.phrase().join(" "))
            .collect::<Vec<_>>()
            .join(" | ");
        DatasetHeader {
            format_version: DATASET_FORMAT_VERSION,
            grammar_version: GRAMMAR_VERSION,
            vocab: vocab().iter().map(|s| s.to_string()).collect(),
            templates: vec![
                "ACTION the ORDINAL COLOR CATEGORY POSITION".to_string(),
                format!("ACTION: {actions}"),
                format!("POSITION: {positions}"),
            ],
            spec: spec.clone(),
        }
    }
}

/// One dataset line after the header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: u64,
    pub regions: Vec<RegionProposal>,
    pub tokens: Vec<usize>,
    pub target_index: usize,
    pub grammar_version: u32,
    pub seed: u64,
}

impl From<&GroundingSample> for DatasetRecord {
    fn from(s: &GroundingSample) -> Self {
        DatasetRecord {
            id: s.id,
            regions: s.regions.clone(),
            tokens: s.command.ids.clone(),
            target_index: s.target_index,
            grammar_version: GRAMMAR_VERSION,
            seed: s.seed,
        }
    }
}

impl DatasetRecord {
    pub fn into_sample(self) -> GroundingSample {
        GroundingSample {
            id: self.id,
            regions: self.regions,
            command: CommandTokens { ids: self.tokens },
            target_index: self.target_index,
            seed: self.seed,
        }
    }
}

/// Writes `count` samples (plus header) as JSON lines.
pub fn generate_dataset(spec: &SceneSpec, count: usize, seed: u64, path: &Path) -> Result<()> {
    generate_dataset_with_mode(spec, count, seed, path, ExecMode::default())
}

pub fn generate_dataset_with_mode(
    spec: &SceneSpec,
    count: usize,
    seed: u64,
    path: &Path,
    mode: ExecMode,
) -> Result<()> {
    spec.validate()?;
    if count == 0 {
        return Err(Error::InvalidConfig("dataset count must be at least 1".into()));
    }
    let samples = map_indexed(mode, count, |i| generate_sample(spec, i as u64, seed));

    let file = std::fs::File::create(path)?;
    let mut out = std::io::BufWriter::new(file);
    serde_json::to_writer(&mut out, &DatasetHeader::current(spec))?;
    out.write_all(b"\n")?;
    for s in samples {
        serde_json::to_writer(&mut out, &DatasetRecord::from(&s?))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}
