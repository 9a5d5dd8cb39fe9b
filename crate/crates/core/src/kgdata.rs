//! Knowledge-graph data model, file ingestion, synthesis splits and the
//! synthetic dataset generator.
//!
//! # Directory layout
//!
//! All text files are UTF-8, tab separated, one record per line.
//!
//! | file | columns | required |
//! |------|---------|----------|
//! | `ent_ids_1`, `ent_ids_2` | raw id, name | yes |
//! | `triples_1`, `triples_2` | head, relation, tail (raw ids) | yes |
//! | `rel_ids_1`, `rel_ids_2` | raw id, name | no |
//! | `attrs_1`, `attrs_2` | entity, attribute (raw ids) | no |
//! | `attr_ids_1`, `attr_ids_2` | raw id, name | no |
//! | `img_features_1.f32`, `img_features_2.f32` | binary, see below | no |
//! | `sup_pairs` | source raw id, target raw id | yes |
//! | `ref_pairs` | source raw id, target raw id | yes |
//! | `val_pairs` | source raw id, target raw id | no |
//! | `dangling_pairs` | source raw id, target raw id | no |
//!
//! Entity ids are densely re-indexed in `ent_ids` order. Relation and attribute
//! ids follow `rel_ids`/`attr_ids` order when those files exist, and ascending
//! raw-id order otherwise.
//!
//! Image files hold two little-endian `u64` values (rows, cols) followed by
//! `rows · cols` little-endian `f32` values, row-major, one row per entity in
//! `ent_ids` order. A row made entirely of NaN marks an entity without an image.
//! Such rows, and every row when the file is absent, are filled from a standard
//! normal seeded per entity, and the image mask records them as synthesized.
//!
//! When `dangling_pairs` is present the files describe the full target KG and
//! the loader builds the purged training view itself.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::Matrix;
use crate::error::{GeeaError, Result};

pub type EntityId = usize;
pub type Pair = (EntityId, EntityId);

/// Which KG of a pair an entity belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Side {
    Source,
    Target,
}

impl Side {
    pub fn index(self) -> usize {
        match self {
            Side::Source => 0,
            Side::Target => 1,
        }
    }

    pub fn other(self) -> Side {
        match self {
            Side::Source => Side::Target,
            Side::Target => Side::Source,
        }
    }

    fn file_suffix(self) -> &'static str {
        match self {
            Side::Source => "1",
            Side::Target => "2",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KnowledgeGraph {
    pub entity_names: Vec<String>,
    pub relation_names: Vec<String>,
    pub attribute_names: Vec<String>,
    pub triples: Vec<(EntityId, usize, EntityId)>,
    pub attributes: Vec<(EntityId, usize)>,
    /// `entity_count × d_img`
    pub image_features: Matrix,
    /// `true` where the image row is a real feature rather than a random fill.
    pub image_mask: Vec<bool>,
}

impl KnowledgeGraph {
    pub fn entity_count(&self) -> usize {
        self.entity_names.len()
    }

    pub fn relation_count(&self) -> usize {
        self.relation_names.len()
    }

    pub fn attribute_count(&self) -> usize {
        self.attribute_names.len()
    }

    pub fn image_dim(&self) -> usize {
        self.image_features.ncols()
    }

    /// An empty KG with the given image width.
    pub fn empty(image_dim: usize) -> Self {
        KnowledgeGraph {
            entity_names: Vec::new(),
            relation_names: Vec::new(),
            attribute_names: Vec::new(),
            triples: Vec::new(),
            attributes: Vec::new(),
            image_features: Matrix::zeros((0, image_dim)),
            image_mask: Vec::new(),
        }
    }

    /// Checks id ranges, duplicate records and matrix shapes.
    pub fn validate(&self) -> Result<()> {
        let n = self.entity_count();
        let mut seen = HashSet::with_capacity(self.triples.len());
        for (i, &(h, r, t)) in self.triples.iter().enumerate() {
            if h >= n || t >= n || r >= self.relation_count() {
                return Err(invalid("triples", i + 1, format!("id out of range in ({h}, {r}, {t})")));
            }
            if !seen.insert((h, r, t)) {
                return Err(invalid("triples", i + 1, format!("duplicate triple ({h}, {r}, {t})")));
            }
        }
        let mut seen = HashSet::with_capacity(self.attributes.len());
        for (i, &(e, a)) in self.attributes.iter().enumerate() {
            if e >= n || a >= self.attribute_count() {
                return Err(invalid("attributes", i + 1, format!("id out of range in ({e}, {a})")));
            }
            if !seen.insert((e, a)) {
                return Err(invalid("attributes", i + 1, format!("duplicate attribute ({e}, {a})")));
            }
        }
        if self.image_features.nrows() != n || self.image_mask.len() != n {
            return Err(GeeaError::Shape(format!(
                "image table has {} rows and mask {} entries for {n} entities",
                self.image_features.nrows(),
                self.image_mask.len()
            )));
        }
        Ok(())
    }

    /// Undirected neighbor lists (self loops dropped, duplicates merged).
    pub fn neighbors(&self) -> Vec<Vec<EntityId>> {
        let mut sets = vec![BTreeSet::new(); self.entity_count()];
        for &(h, _, t) in &self.triples {
            if h != t {
                sets[h].insert(t);
                sets[t].insert(h);
            }
        }
        sets.into_iter().map(|s| s.into_iter().collect()).collect()
    }

    /// Attribute ids per entity, ascending.
    pub fn attribute_lists(&self) -> Vec<Vec<usize>> {
        let mut lists = vec![Vec::new(); self.entity_count()];
        for &(e, a) in &self.attributes {
            lists[e].push(a);
        }
        for l in &mut lists {
            l.sort_unstable();
        }
        lists
    }

    /// Copy with every triple, attribute and image touching `removed` purged.
    pub fn purged(&self, removed: &HashSet<EntityId>, image_seed: u64, side: Side) -> KnowledgeGraph {
        let mut kg = self.clone();
        kg.triples.retain(|(h, _, t)| !removed.contains(h) && !removed.contains(t));
        kg.attributes.retain(|(e, _)| !removed.contains(e));
        for &e in removed {
            kg.image_mask[e] = false;
            let row = random_image_row(image_seed, side, e, kg.image_dim());
            kg.image_features.row_mut(e).assign(&row);
        }
        kg
    }
}

fn invalid(file: &str, line: usize, message: String) -> GeeaError {
    GeeaError::Validation {
        file: file.to_string(),
        line,
        message,
    }
}

/// Deterministic standard-normal image row for an entity without a real image.
pub fn random_image_row(seed: u64, side: Side, entity: EntityId, dim: usize) -> ndarray::Array1<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((side.index() as u64) << 40) | entity as u64);
    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentDataset {
    pub source: KnowledgeGraph,
    /// Training view of the target KG (purged of dangling targets).
    pub target: KnowledgeGraph,
    pub seed_alignments: Vec<Pair>,
    pub test_alignments: Vec<Pair>,
    pub valid_alignments: Vec<Pair>,
    pub dangling_pairs: Vec<Pair>,
    /// Unpurged target KG, present once a synthesis split exists.
    pub held_out_target: Option<KnowledgeGraph>,
    /// Seed used for random image fills.
    pub image_seed: u64,
}

impl AlignmentDataset {
    pub fn kg(&self, side: Side) -> &KnowledgeGraph {
        match side {
            Side::Source => &self.source,
            Side::Target => &self.target,
        }
    }

    /// Target KG with dangling information intact.
    pub fn full_target(&self) -> &KnowledgeGraph {
        self.held_out_target.as_ref().unwrap_or(&self.target)
    }

    /// Target entities whose information is withheld from training.
    pub fn dangling_targets(&self) -> HashSet<EntityId> {
        self.dangling_pairs.iter().map(|&(_, t)| t).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.source.validate()?;
        self.target.validate()?;
        if let Some(full) = &self.held_out_target {
            full.validate()?;
            if full.entity_count() != self.target.entity_count() {
                return Err(GeeaError::Shape("held-out target entity count differs from training view".into()));
            }
        }
        if self.source.image_dim() != self.target.image_dim() {
            return Err(GeeaError::Shape(format!(
                "image widths differ: {} vs {}",
                self.source.image_dim(),
                self.target.image_dim()
            )));
        }
        let sets: [(&str, &Vec<Pair>); 4] = [
            ("sup_pairs", &self.seed_alignments),
            ("ref_pairs", &self.test_alignments),
            ("val_pairs", &self.valid_alignments),
            ("dangling_pairs", &self.dangling_pairs),
        ];
        let mut all_pairs: HashMap<Pair, &str> = HashMap::new();
        for (name, pairs) in sets {
            let mut src_seen = HashSet::new();
            let mut tgt_seen = HashSet::new();
            for (i, &(s, t)) in pairs.iter().enumerate() {
                if s >= self.source.entity_count() || t >= self.target.entity_count() {
                    return Err(invalid(name, i + 1, format!("pair ({s}, {t}) out of range")));
                }
                if !src_seen.insert(s) || !tgt_seen.insert(t) {
                    return Err(invalid(name, i + 1, format!("pair ({s}, {t}) breaks one-to-one alignment")));
                }
                if let Some(other) = all_pairs.insert((s, t), name) {
                    return Err(invalid(name, i + 1, format!("pair ({s}, {t}) also appears in {other}")));
                }
            }
        }
        Ok(())
    }
}

/// Options for [`load_dataset`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoadOptions {
    /// Seed for filling missing image rows.
    pub image_seed: u64,
    /// Image width used when neither side has an image file.
    pub missing_image_dim: usize,
    /// Fraction of seed pairs moved to validation when `val_pairs` is absent.
    pub valid_fraction: f64,
    /// Seed for choosing those validation pairs.
    pub split_seed: u64,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            image_seed: 0,
            missing_image_dim: 32,
            valid_fraction: 0.05,
            split_seed: 0,
        }
    }
}

struct RawKg {
    kg: KnowledgeGraph,
    entity_index: HashMap<String, EntityId>,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| GeeaError::Ingest {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn records(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l.split('\t').map(str::trim).collect()))
}

fn file_label(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// Reads an `id \t name` file into (ordered raw ids, names).
fn read_id_file(path: &Path) -> Result<(Vec<String>, Vec<String>)> {
    let text = read_text(path)?;
    let label = file_label(path);
    let mut ids = Vec::new();
    let mut names = Vec::new();
    let mut seen = HashSet::new();
    for (line, cols) in records(&text) {
        let raw = cols[0].to_string();
        if !seen.insert(raw.clone()) {
            return Err(invalid(&label, line, format!("duplicate id {raw}")));
        }
        names.push(cols.get(1).map(|s| s.to_string()).unwrap_or_else(|| raw.clone()));
        ids.push(raw);
    }
    Ok((ids, names))
}

/// Sorts raw ids numerically when they all parse as integers, lexically otherwise.
fn sorted_vocab(raw: BTreeSet<String>) -> Vec<String> {
    let mut v: Vec<String> = raw.into_iter().collect();
    if v.iter().all(|s| s.parse::<i64>().is_ok()) {
        v.sort_by_key(|s| s.parse::<i64>().unwrap());
    }
    v
}

fn load_kg(dir: &Path, side: Side, options: &LoadOptions) -> Result<RawKg> {
    let sfx = side.file_suffix();
    let (ent_raw, entity_names) = read_id_file(&dir.join(format!("ent_ids_{sfx}")))?;
    let entity_index: HashMap<String, EntityId> =
        ent_raw.iter().enumerate().map(|(i, r)| (r.clone(), i)).collect();

    let triples_path = dir.join(format!("triples_{sfx}"));
    let triples_label = file_label(&triples_path);
    let triples_text = read_text(&triples_path)?;
    let mut raw_triples = Vec::new();
    for (line, cols) in records(&triples_text) {
        if cols.len() < 3 {
            return Err(invalid(&triples_label, line, "expected head, relation, tail".into()));
        }
        let lookup = |raw: &str| {
            entity_index
                .get(raw)
                .copied()
                .ok_or_else(|| invalid(&triples_label, line, format!("unknown entity id {raw}")))
        };
        raw_triples.push((line, lookup(cols[0])?, cols[1].to_string(), lookup(cols[2])?));
    }

    let rel_path = dir.join(format!("rel_ids_{sfx}"));
    let (rel_raw, relation_names) = if rel_path.exists() {
        read_id_file(&rel_path)?
    } else {
        let v = sorted_vocab(raw_triples.iter().map(|(_, _, r, _)| r.clone()).collect());
        (v.clone(), v)
    };
    let rel_index: HashMap<&str, usize> = rel_raw.iter().enumerate().map(|(i, r)| (r.as_str(), i)).collect();

    let mut triples = Vec::with_capacity(raw_triples.len());
    let mut seen = HashSet::new();
    for (line, h, r, t) in &raw_triples {
        let rel = *rel_index
            .get(r.as_str())
            .ok_or_else(|| invalid(&triples_label, *line, format!("unknown relation id {r}")))?;
        if seen.insert((*h, rel, *t)) {
            triples.push((*h, rel, *t));
        } else {
            log::warn!("{triples_label}:{line}: duplicate triple dropped");
        }
    }

    let attrs_path = dir.join(format!("attrs_{sfx}"));
    let mut raw_attrs = Vec::new();
    if attrs_path.exists() {
        let label = file_label(&attrs_path);
        let text = read_text(&attrs_path)?;
        for (line, cols) in records(&text) {
            if cols.len() < 2 {
                return Err(invalid(&label, line, "expected entity, attribute".into()));
            }
            let e = *entity_index
                .get(cols[0])
                .ok_or_else(|| invalid(&label, line, format!("unknown entity id {}", cols[0])))?;
            raw_attrs.push((line, e, cols[1].to_string()));
        }
    }
    let attr_path = dir.join(format!("attr_ids_{sfx}"));
    let (attr_raw, attribute_names) = if attr_path.exists() {
        read_id_file(&attr_path)?
    } else {
        let v = sorted_vocab(raw_attrs.iter().map(|(_, _, a)| a.clone()).collect());
        (v.clone(), v)
    };
    let attr_index: HashMap<&str, usize> = attr_raw.iter().enumerate().map(|(i, r)| (r.as_str(), i)).collect();
    let mut attributes = Vec::with_capacity(raw_attrs.len());
    let mut seen = HashSet::new();
    for (line, e, a) in &raw_attrs {
        let aid = *attr_index
            .get(a.as_str())
            .ok_or_else(|| invalid(&format!("attrs_{sfx}"), *line, format!("unknown attribute id {a}")))?;
        if seen.insert((*e, aid)) {
            attributes.push((*e, aid));
        }
    }

    let n = entity_names.len();
    let img_path = dir.join(format!("img_features_{sfx}.f32"));
    let (image_features, image_mask) = if img_path.exists() {
        let m = read_image_file(&img_path)?;
        if m.nrows() != n {
            return Err(GeeaError::Shape(format!(
                "{} has {} rows for {n} entities",
                file_label(&img_path),
                m.nrows()
            )));
        }
        fill_missing_images(m, options.image_seed, side)
    } else {
        let other = dir.join(format!("img_features_{}.f32", side.other().file_suffix()));
        let dim = if other.exists() {
            read_image_file(&other)?.ncols()
        } else {
            options.missing_image_dim
        };
        fill_missing_images(Matrix::from_elem((n, dim), f64::NAN), options.image_seed, side)
    };

    let kg = KnowledgeGraph {
        entity_names,
        relation_names,
        attribute_names,
        triples,
        attributes,
        image_features,
        image_mask,
    };
    Ok(RawKg { kg, entity_index })
}

fn fill_missing_images(mut m: Matrix, seed: u64, side: Side) -> (Matrix, Vec<bool>) {
    let dim = m.ncols();
    let mut mask = Vec::with_capacity(m.nrows());
    for (e, mut row) in m.rows_mut().into_iter().enumerate() {
        let missing = dim > 0 && row.iter().all(|x| x.is_nan());
        if missing {
            row.assign(&random_image_row(seed, side, e, dim));
        }
        mask.push(!missing);
    }
    (m, mask)
}

/// Reads a binary image-feature matrix (see module docs).
pub fn read_image_file(path: &Path) -> Result<Matrix> {
    let bytes = fs::read(path).map_err(|e| GeeaError::Ingest {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let bad = |msg: &str| GeeaError::Ingest {
        path: path.to_path_buf(),
        message: msg.to_string(),
    };
    if bytes.len() < 16 {
        return Err(bad("missing header"));
    }
    let rows = u64::from_le_bytes(bytes[0..8].try_into().unwrap()) as usize;
    let cols = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = &bytes[16..];
    if body.len() != rows * cols * 4 {
        return Err(bad(&format!("expected {} data bytes, found {}", rows * cols * 4, body.len())));
    }
    let values: Vec<f64> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(Array2::from_shape_vec((rows, cols), values).expect("size checked"))
}

/// Writes a binary image-feature matrix; rows with `mask = false` are written as NaN.
pub fn write_image_file(path: &Path, features: &Matrix, mask: &[bool]) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + features.len() * 4);
    buf.extend_from_slice(&(features.nrows() as u64).to_le_bytes());
    buf.extend_from_slice(&(features.ncols() as u64).to_le_bytes());
    for (row, &real) in features.rows().into_iter().zip(mask) {
        for &x in row {
            let v = if real { x as f32 } else { f32::NAN };
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

fn read_pairs(path: &Path, src: &HashMap<String, EntityId>, tgt: &HashMap<String, EntityId>) -> Result<Vec<Pair>> {
    let label = file_label(path);
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (line, cols) in records(&text) {
        if cols.len() < 2 {
            return Err(invalid(&label, line, "expected source id, target id".into()));
        }
        let s = *src
            .get(cols[0])
            .ok_or_else(|| invalid(&label, line, format!("unknown source entity id {}", cols[0])))?;
        let t = *tgt
            .get(cols[1])
            .ok_or_else(|| invalid(&label, line, format!("unknown target entity id {}", cols[1])))?;
        out.push((s, t));
    }
    Ok(out)
}

/// Loads a dataset directory (see module docs for the layout).
pub fn load_dataset(dir: &Path, options: &LoadOptions) -> Result<AlignmentDataset> {
    let source = load_kg(dir, Side::Source, options)?;
    let target = load_kg(dir, Side::Target, options)?;
    let pairs = |name: &str| read_pairs(&dir.join(name), &source.entity_index, &target.entity_index);

    let mut seed_alignments = pairs("sup_pairs")?;
    let test_alignments = pairs("ref_pairs")?;
    let valid_alignments = if dir.join("val_pairs").exists() {
        pairs("val_pairs")?
    } else {
        let count = (options.valid_fraction * seed_alignments.len() as f64).floor() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(options.split_seed);
        let mut idx: Vec<usize> = (0..seed_alignments.len()).collect();
        idx.shuffle(&mut rng);
        let chosen: HashSet<usize> = idx[..count].iter().copied().collect();
        let valid: Vec<Pair> = (0..seed_alignments.len())
            .filter(|i| chosen.contains(i))
            .map(|i| seed_alignments[i])
            .collect();
        let mut i = 0;
        seed_alignments.retain(|_| {
            let keep = !chosen.contains(&i);
            i += 1;
            keep
        });
        valid
    };
    let dangling_pairs = if dir.join("dangling_pairs").exists() {
        pairs("dangling_pairs")?
    } else {
        Vec::new()
    };

    let (target_view, held_out_target) = if dangling_pairs.is_empty() {
        (target.kg, None)
    } else {
        let removed: HashSet<EntityId> = dangling_pairs.iter().map(|&(_, t)| t).collect();
        let view = target.kg.purged(&removed, options.image_seed, Side::Target);
        (view, Some(target.kg))
    };

    let dataset = AlignmentDataset {
        source: source.kg,
        target: target_view,
        seed_alignments,
        test_alignments,
        valid_alignments,
        dangling_pairs,
        held_out_target,
        image_seed: options.image_seed,
    };
    dataset.validate()?;
    Ok(dataset)
}

fn write_lines(path: &Path, lines: impl Iterator<Item = String>) -> Result<()> {
    let mut out = String::new();
    for l in lines {
        out.push_str(&l);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

fn save_kg(dir: &Path, kg: &KnowledgeGraph, side: Side) -> Result<()> {
    let sfx = side.file_suffix();
    write_lines(
        &dir.join(format!("ent_ids_{sfx}")),
        kg.entity_names.iter().enumerate().map(|(i, n)| format!("{i}\t{n}")),
    )?;
    write_lines(
        &dir.join(format!("rel_ids_{sfx}")),
        kg.relation_names.iter().enumerate().map(|(i, n)| format!("{i}\t{n}")),
    )?;
    write_lines(
        &dir.join(format!("attr_ids_{sfx}")),
        kg.attribute_names.iter().enumerate().map(|(i, n)| format!("{i}\t{n}")),
    )?;
    write_lines(
        &dir.join(format!("triples_{sfx}")),
        kg.triples.iter().map(|(h, r, t)| format!("{h}\t{r}\t{t}")),
    )?;
    write_lines(
        &dir.join(format!("attrs_{sfx}")),
        kg.attributes.iter().map(|(e, a)| format!("{e}\t{a}")),
    )?;
    write_image_file(
        &dir.join(format!("img_features_{sfx}.f32")),
        &kg.image_features,
        &kg.image_mask,
    )
}

/// Writes `dataset` so that [`load_dataset`] with the same image seed
/// reproduces it. The full target KG is written; the dangling purge is
/// re-applied on load.
pub fn save_dataset(dataset: &AlignmentDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    save_kg(dir, &dataset.source, Side::Source)?;
    save_kg(dir, dataset.full_target(), Side::Target)?;
    let pair_lines = |pairs: &[Pair]| pairs.iter().map(|(s, t)| format!("{s}\t{t}")).collect::<Vec<_>>();
    write_lines(&dir.join("sup_pairs"), pair_lines(&dataset.seed_alignments).into_iter())?;
    write_lines(&dir.join("ref_pairs"), pair_lines(&dataset.test_alignments).into_iter())?;
    write_lines(&dir.join("val_pairs"), pair_lines(&dataset.valid_alignments).into_iter())?;
    let dangling = dir.join("dangling_pairs");
    if dataset.dangling_pairs.is_empty() {
        if dangling.exists() {
            fs::remove_file(dangling)?;
        }
    } else {
        write_lines(&dangling, pair_lines(&dataset.dangling_pairs).into_iter())?;
    }
    Ok(())
}

/// Number of pairs moved to the dangling set for a given fraction.
pub fn dangling_count(test_size: usize, fraction: f64) -> usize {
    // Guard against products like 0.3 · 10 = 3.0000000000000004.
    let raw = fraction * test_size as f64;
    ((raw - 1e-9).ceil().max(0.0) as usize).min(test_size)
}

/// Moves `⌈fraction · |T|⌉` random test pairs into the dangling set and purges
/// their target entities from the target training view.
pub fn build_synthesis_split(dataset: &AlignmentDataset, fraction: f64, seed: u64) -> Result<AlignmentDataset> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(GeeaError::Argument(format!("dangling fraction {fraction} must lie in (0, 1)")));
    }
    if dataset.test_alignments.is_empty() {
        return Err(GeeaError::Argument("test alignment set is empty".into()));
    }
    let k = dangling_count(dataset.test_alignments.len(), fraction);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..dataset.test_alignments.len()).collect();
    idx.shuffle(&mut rng);
    let chosen: HashSet<usize> = idx[..k].iter().copied().collect();

    let mut out = dataset.clone();
    out.test_alignments = Vec::with_capacity(dataset.test_alignments.len() - k);
    for (i, &p) in dataset.test_alignments.iter().enumerate() {
        if chosen.contains(&i) {
            out.dangling_pairs.push(p);
        } else {
            out.test_alignments.push(p);
        }
    }
    let full = dataset.full_target().clone();
    out.target = full.purged(&out.dangling_targets(), dataset.image_seed, Side::Target);
    out.held_out_target = Some(full);
    out.validate()?;
    Ok(out)
}

/// Settings for [`generate_synthetic_pair`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub entities: usize,
    pub relations: usize,
    pub attributes: usize,
    pub image_dim: usize,
    /// Structural perturbation probability and image-noise standard deviation.
    pub noise: f64,
    pub seed_fraction: f64,
    /// Expected number of outgoing triples per entity.
    pub triples_per_entity: f64,
    /// Expected number of attributes per entity.
    pub attributes_per_entity: f64,
    /// Fraction of the non-seed pairs held out for validation.
    pub valid_fraction: f64,
    /// Probability that an entity carries an image, drawn per entity and KG.
    pub image_coverage: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            entities: 200,
            relations: 10,
            attributes: 50,
            image_dim: 16,
            noise: 0.1,
            seed_fraction: 0.3,
            triples_per_entity: 3.0,
            attributes_per_entity: 4.0,
            valid_fraction: 0.1,
            image_coverage: 1.0,
        }
    }
}

/// Generates two KGs related by a random bijection. The target is the
/// relabeled source with each triple and attribute replaced by a random one
/// with probability `noise`, and image features perturbed by Gaussian noise of
/// standard deviation `noise`. Entities without an image get the same
/// seeded random fill the loader uses.
pub fn generate_synthetic_pair(config: &SyntheticConfig, seed: u64) -> Result<AlignmentDataset> {
    if config.entities < 2 || config.relations == 0 || config.attributes == 0 || config.image_dim == 0 {
        return Err(GeeaError::Argument(
            "synthetic pair needs at least 2 entities and one relation, attribute and image dimension".into(),
        ));
    }
    if !(0.0..=1.0).contains(&config.noise) || !(0.0..1.0).contains(&config.seed_fraction) {
        return Err(GeeaError::Argument("noise must lie in [0, 1] and seed fraction in [0, 1)".into()));
    }
    if !(0.0..1.0).contains(&config.valid_fraction) {
        return Err(GeeaError::Argument("valid fraction must lie in [0, 1)".into()));
    }
    if !(0.0..=1.0).contains(&config.image_coverage) {
        return Err(GeeaError::Argument("image coverage must lie in [0, 1]".into()));
    }
    let n = config.entities;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let edge_p = (config.triples_per_entity / (n - 1) as f64).min(1.0);
    let mut src_triples = Vec::new();
    for h in 0..n {
        for t in 0..n {
            if h != t && rng.random::<f64>() < edge_p {
                src_triples.push((h, rng.random_range(0..config.relations), t));
            }
        }
    }
    let attr_p = (config.attributes_per_entity / config.attributes as f64).min(1.0);
    let mut src_attrs = Vec::new();
    for e in 0..n {
        for a in 0..config.attributes {
            if rng.random::<f64>() < attr_p {
                src_attrs.push((e, a));
            }
        }
    }
    let mut src_images = Array2::from_shape_simple_fn((n, config.image_dim), || StandardNormal.sample(&mut rng));

    let mut bijection: Vec<EntityId> = (0..n).collect();
    bijection.shuffle(&mut rng);

    let mut tgt_triples = Vec::with_capacity(src_triples.len());
    let mut seen = HashSet::new();
    for &(h, r, t) in &src_triples {
        let mut triple = (bijection[h], r, bijection[t]);
        if config.noise > 0.0 && rng.random::<f64>() < config.noise {
            loop {
                let h2 = rng.random_range(0..n);
                let t2 = rng.random_range(0..n);
                if h2 != t2 {
                    triple = (h2, rng.random_range(0..config.relations), t2);
                    break;
                }
            }
        }
        if seen.insert(triple) {
            tgt_triples.push(triple);
        }
    }
    let mut tgt_attrs = Vec::with_capacity(src_attrs.len());
    let mut seen = HashSet::new();
    for &(e, a) in &src_attrs {
        let mut rec = (bijection[e], a);
        if config.noise > 0.0 && rng.random::<f64>() < config.noise {
            rec = (rng.random_range(0..n), rng.random_range(0..config.attributes));
        }
        if seen.insert(rec) {
            tgt_attrs.push(rec);
        }
    }
    let mut tgt_images = Matrix::zeros((n, config.image_dim));
    let noise = Normal::new(0.0, config.noise.max(0.0)).map_err(|e| GeeaError::Argument(e.to_string()))?;
    for s in 0..n {
        let mut row = tgt_images.row_mut(bijection[s]);
        row.assign(&src_images.row(s));
        if config.noise > 0.0 {
            row.mapv_inplace(|x| x + noise.sample(&mut rng));
        }
    }
    tgt_triples.sort_unstable();
    tgt_attrs.sort_unstable();
    // Image files hold 32-bit floats; rounding here makes a saved pair reload
    // bit-identically.
    src_images.mapv_inplace(|x| x as f32 as f64);
    tgt_images.mapv_inplace(|x| x as f32 as f64);
    let mut masks = [vec![true; n], vec![true; n]];
    for (side, images) in [(Side::Source, &mut src_images), (Side::Target, &mut tgt_images)] {
        for e in 0..n {
            if rng.random::<f64>() >= config.image_coverage {
                masks[side.index()][e] = false;
                images.row_mut(e).assign(&random_image_row(0, side, e, config.image_dim));
            }
        }
    }
    let [src_mask, tgt_mask] = masks;

    let names = |prefix: &str, count: usize| (0..count).map(|i| format!("{prefix}{i}")).collect::<Vec<_>>();
    let source = KnowledgeGraph {
        entity_names: names("s", n),
        relation_names: names("r", config.relations),
        attribute_names: names("a", config.attributes),
        triples: src_triples,
        attributes: src_attrs,
        image_features: src_images,
        image_mask: src_mask,
    };
    let target = KnowledgeGraph {
        entity_names: names("t", n),
        relation_names: names("r", config.relations),
        attribute_names: names("a", config.attributes),
        triples: tgt_triples,
        attributes: tgt_attrs,
        image_features: tgt_images,
        image_mask: tgt_mask,
    };

    let mut order: Vec<EntityId> = (0..n).collect();
    order.shuffle(&mut rng);
    let pairs: Vec<Pair> = order.iter().map(|&s| (s, bijection[s])).collect();
    let n_seed = (config.seed_fraction * n as f64).round() as usize;
    let rest = n - n_seed;
    let n_valid = (config.valid_fraction * rest as f64).round() as usize;
    let dataset = AlignmentDataset {
        source,
        target,
        seed_alignments: pairs[..n_seed].to_vec(),
        valid_alignments: pairs[n_seed..n_seed + n_valid].to_vec(),
        test_alignments: pairs[n_seed + n_valid..].to_vec(),
        dangling_pairs: Vec::new(),
        held_out_target: None,
        image_seed: 0,
    };
    dataset.validate()?;
    Ok(dataset)
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KgStatistics {
    pub entities: usize,
    pub relations: usize,
    pub attributes: usize,
    pub images: usize,
    pub triples: usize,
    pub attribute_triples: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStatistics {
    pub source: KgStatistics,
    pub target: KgStatistics,
    /// Test alignments before the synthesis split (known + unknown).
    pub test_alignments: usize,
    /// Test alignments with both sides available during training.
    pub known_test_alignments: usize,
    /// Dangling pairs.
    pub unknown_test_alignments: usize,
    pub seed_alignments: usize,
    pub valid_alignments: usize,
}

fn kg_statistics(kg: &KnowledgeGraph) -> KgStatistics {
    let used_relations: HashSet<usize> = kg.triples.iter().map(|&(_, r, _)| r).collect();
    KgStatistics {
        entities: kg.entity_count(),
        relations: kg.relation_count().max(used_relations.len()),
        attributes: kg.attribute_count(),
        images: kg.image_mask.iter().filter(|&&m| m).count(),
        triples: kg.triples.len(),
        attribute_triples: kg.attributes.len(),
    }
}

pub fn compute_statistics(dataset: &AlignmentDataset) -> DatasetStatistics {
    DatasetStatistics {
        source: kg_statistics(&dataset.source),
        target: kg_statistics(dataset.full_target()),
        test_alignments: dataset.test_alignments.len() + dataset.dangling_pairs.len(),
        known_test_alignments: dataset.test_alignments.len(),
        unknown_test_alignments: dataset.dangling_pairs.len(),
        seed_alignments: dataset.seed_alignments.len(),
        valid_alignments: dataset.valid_alignments.len(),
    }
}

impl DatasetStatistics {
    /// Aligned-column text table in the layout of the usual dataset summary.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<8} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10}",
            "kg", "test", "known", "unknown", "entities", "relations", "attributes", "images"
        );
        for (label, s) in [("source", &self.source), ("target", &self.target)] {
            let _ = writeln!(
                out,
                "{:<8} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10}",
                label,
                self.test_alignments,
                self.known_test_alignments,
                self.unknown_test_alignments,
                s.entities,
                s.relations,
                s.attributes,
                s.images
            );
        }
        out
    }
}

/// Convenience used by the CLI: load when `dir` exists, otherwise fail with
/// an ingestion error that names it.
pub fn require_dir(dir: &Path) -> Result<PathBuf> {
    if dir.is_dir() {
        Ok(dir.to_path_buf())
    } else {
        Err(GeeaError::Ingest {
            path: dir.to_path_buf(),
            message: "not a directory".into(),
        })
    }
}

/// Writes only the pair files; used after re-splitting an existing dataset.
pub fn write_pairs(path: &Path, pairs: &[Pair]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for (s, t) in pairs {
        writeln!(f, "{s}\t{t}")?;
    }
    Ok(())
}
