//! Query/item datasets, CSV ingestion, synthetic biased data, per-query
//! splitting and minibatch sampling.
//!
//! CSV rows are `query_id,item_id,relevance,group` where `group` is `0` for the
//! protected (minority) group A and `1` for group B. A header row is accepted
//! when its relevance and group fields are both non-numeric.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Group membership of an item. `A` is the protected/minority group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Group {
    A,
    B,
}

impl Group {
    pub fn from_code(code: u8) -> Option<Group> {
        match code {
            0 => Some(Group::A),
            1 => Some(Group::B),
            _ => None,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Group::A => 0,
            Group::B => 1,
        }
    }

    pub fn other(self) -> Group {
        match self {
            Group::A => Group::B,
            Group::B => Group::A,
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Group::A => f.write_str("A"),
            Group::B => f.write_str("B"),
        }
    }
}

/// One item of a query list. `item` indexes the dataset's item catalog.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub item: usize,
    pub relevance: f64,
    pub group: Group,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryGroup {
    pub id: String,
    /// Row of this query in the scoring model; stable across splits.
    pub index: usize,
    pub items: Vec<Item>,
}

impl QueryGroup {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn item_ids(&self) -> Vec<usize> {
        self.items.iter().map(|it| it.item).collect()
    }

    pub fn labels(&self) -> Vec<f64> {
        self.items.iter().map(|it| it.relevance).collect()
    }

    pub fn groups(&self) -> Vec<Group> {
        self.items.iter().map(|it| it.group).collect()
    }

    /// Positions (into `items`) of the members of `group`.
    pub fn members(&self, group: Group) -> Vec<usize> {
        self.items
            .iter()
            .enumerate()
            .filter(|(_, it)| it.group == group)
            .map(|(pos, _)| pos)
            .collect()
    }

    pub fn group_size(&self, group: Group) -> usize {
        self.items.iter().filter(|it| it.group == group).count()
    }

    pub fn has_both_groups(&self) -> bool {
        self.group_size(Group::A) > 0 && self.group_size(Group::B) > 0
    }
}

/// A collection of query lists over a shared item catalog.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    queries: Vec<QueryGroup>,
    item_names: Vec<String>,
    item_groups: Vec<Group>,
    query_slots: usize,
    pair_offsets: Vec<usize>,
}

impl Dataset {
    /// Builds a dataset, checking that item indices are in range and unique
    /// within each query and that query indices fit in `query_slots`.
    pub fn new(
        queries: Vec<QueryGroup>,
        item_names: Vec<String>,
        item_groups: Vec<Group>,
        query_slots: usize,
    ) -> Result<Dataset> {
        if item_names.len() != item_groups.len() {
            return Err(Error::Config(format!(
                "item table has {} names but {} groups",
                item_names.len(),
                item_groups.len()
            )));
        }
        for q in &queries {
            if q.index >= query_slots {
                return Err(Error::Lookup {
                    kind: "query",
                    index: q.index,
                    len: query_slots,
                });
            }
            let mut seen = HashSet::with_capacity(q.items.len());
            for it in &q.items {
                if it.item >= item_names.len() {
                    return Err(Error::Lookup {
                        kind: "item",
                        index: it.item,
                        len: item_names.len(),
                    });
                }
                if !seen.insert(it.item) {
                    return Err(Error::Duplicate {
                        line: 0,
                        query: q.id.clone(),
                        item: item_names[it.item].clone(),
                    });
                }
                if !(it.relevance >= 0.0 && it.relevance.is_finite()) {
                    return Err(Error::Config(format!(
                        "relevance must be finite and nonnegative, got {}",
                        it.relevance
                    )));
                }
            }
        }
        let mut pair_offsets = Vec::with_capacity(queries.len() + 1);
        let mut total = 0;
        pair_offsets.push(0);
        for q in &queries {
            total += q.items.len();
            pair_offsets.push(total);
        }
        Ok(Dataset {
            queries,
            item_names,
            item_groups,
            query_slots,
            pair_offsets,
        })
    }

    /// Groups `(query, item, relevance, group)` records by query in
    /// first-appearance order, interning query and item names.
    pub fn from_records<I, Q, S>(records: I) -> Result<Dataset>
    where
        I: IntoIterator<Item = (Q, S, f64, Group)>,
        Q: Into<String>,
        S: Into<String>,
    {
        let mut builder = Builder::default();
        for (line, (q, it, rel, g)) in records.into_iter().enumerate() {
            builder.push(line + 1, q.into(), it.into(), rel, g)?;
        }
        builder.finish()
    }

    pub fn queries(&self) -> &[QueryGroup] {
        &self.queries
    }

    pub fn num_queries(&self) -> usize {
        self.queries.len()
    }

    /// Number of query rows a model for this dataset must provide.
    pub fn query_slots(&self) -> usize {
        self.query_slots
    }

    pub fn num_items(&self) -> usize {
        self.item_names.len()
    }

    pub fn total_pairs(&self) -> usize {
        *self.pair_offsets.last().unwrap_or(&0)
    }

    pub fn item_name(&self, item: usize) -> &str {
        &self.item_names[item]
    }

    pub fn item_names(&self) -> &[String] {
        &self.item_names
    }

    pub fn item_group(&self, item: usize) -> Group {
        self.item_groups[item]
    }

    pub fn item_groups(&self) -> &[Group] {
        &self.item_groups
    }

    /// Maps a global pair index in `0..total_pairs()` to (query position, item position).
    pub fn pair_at(&self, pair: usize) -> (usize, usize) {
        let q = self.pair_offsets.partition_point(|&off| off <= pair) - 1;
        (q, pair - self.pair_offsets[q])
    }

    fn with_queries(&self, queries: Vec<QueryGroup>) -> Dataset {
        Dataset::new(
            queries,
            self.item_names.clone(),
            self.item_groups.clone(),
            self.query_slots,
        )
        .expect("subset of a valid dataset is valid")
    }

    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "query_id,item_id,relevance,group")?;
        for q in &self.queries {
            for it in &q.items {
                writeln!(
                    w,
                    "{},{},{},{}",
                    q.id,
                    self.item_names[it.item],
                    it.relevance,
                    it.group.code()
                )?;
            }
        }
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_csv(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }
}

#[derive(Default)]
struct Builder {
    query_pos: HashMap<String, usize>,
    item_pos: HashMap<String, usize>,
    queries: Vec<QueryGroup>,
    item_names: Vec<String>,
    item_groups: Vec<Group>,
    seen: HashSet<(usize, usize)>,
}

impl Builder {
    fn push(&mut self, line: usize, q: String, it: String, rel: f64, g: Group) -> Result<()> {
        if !(rel >= 0.0 && rel.is_finite()) {
            return Err(Error::Parse {
                line,
                message: format!("relevance must be finite and nonnegative, got {rel}"),
            });
        }
        let qpos = match self.query_pos.get(&q) {
            Some(&p) => p,
            None => {
                let p = self.queries.len();
                self.query_pos.insert(q.clone(), p);
                self.queries.push(QueryGroup {
                    id: q.clone(),
                    index: p,
                    items: Vec::new(),
                });
                p
            }
        };
        let ipos = match self.item_pos.get(&it) {
            Some(&p) => p,
            None => {
                let p = self.item_names.len();
                self.item_pos.insert(it.clone(), p);
                self.item_names.push(it.clone());
                self.item_groups.push(g);
                p
            }
        };
        if !self.seen.insert((qpos, ipos)) {
            return Err(Error::Duplicate {
                line,
                query: q,
                item: it,
            });
        }
        self.queries[qpos].items.push(Item {
            item: ipos,
            relevance: rel,
            group: g,
        });
        Ok(())
    }

    fn finish(self) -> Result<Dataset> {
        if self.queries.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let slots = self.queries.len();
        Dataset::new(self.queries, self.item_names, self.item_groups, slots)
    }
}

fn parse_group(field: &str) -> Option<Group> {
    field.trim().parse::<u8>().ok().and_then(Group::from_code)
}

/// Reads a dataset from CSV text.
pub fn read_csv(reader: impl BufRead) -> Result<Dataset> {
    let mut builder = Builder::default();
    let mut first_record = true;
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if first_record {
            first_record = false;
            let looks_like_header = fields.len() == 4
                && fields[2].parse::<f64>().is_err()
                && fields[3].parse::<f64>().is_err();
            if looks_like_header {
                continue;
            }
        }
        if fields.len() != 4 {
            return Err(Error::Parse {
                line: lineno,
                message: format!("expected 4 fields, found {}", fields.len()),
            });
        }
        let rel: f64 = fields[2].parse().map_err(|_| Error::Parse {
            line: lineno,
            message: format!("non-numeric relevance {:?}", fields[2]),
        })?;
        let group = parse_group(fields[3]).ok_or_else(|| Error::Parse {
            line: lineno,
            message: format!("group must be 0 or 1, found {:?}", fields[3]),
        })?;
        builder.push(lineno, fields[0].to_string(), fields[1].to_string(), rel, group)?;
    }
    builder.finish()
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(BufReader::new(file))
}

/// Parameters of the synthetic biased-data generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_queries: usize,
    pub items_per_query: usize,
    pub minority_fraction: f64,
    pub bias: f64,
    pub seed: u64,
}

/// Generates a dataset whose group-A items have their latent quality shifted
/// down by `bias`.
///
/// The catalog holds `2 * items_per_query` items, half of each query's group
/// quota drawn from each group's catalog slice, so every item is shared by
/// roughly half of the queries. Quality of item `i` for query `q` is
/// `base_i - bias * [i in A] + 0.5 * <p_q, r_i>` with `base_i ~ N(0,1)` and rank-2
/// affinity factors; relevance is `clamp(round(quality + N(0, 0.5^2)), 0, 4)`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    let n = spec.items_per_query;
    if spec.num_queries == 0 {
        return Err(Error::Config("num_queries must be at least 1".into()));
    }
    if n < 4 {
        return Err(Error::Config("items_per_query must be at least 4".into()));
    }
    if !(spec.minority_fraction > 0.0 && spec.minority_fraction < 1.0) {
        return Err(Error::Config("minority_fraction must lie in (0, 1)".into()));
    }
    if !(spec.bias >= 0.0 && spec.bias.is_finite()) {
        return Err(Error::Config("bias must be finite and nonnegative".into()));
    }
    let n_a = (spec.minority_fraction * n as f64).round() as usize;
    if n_a == 0 || n_a >= n {
        return Err(Error::Config(format!(
            "minority_fraction {} leaves a group empty with {} items per query",
            spec.minority_fraction, n
        )));
    }
    let n_b = n - n_a;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let std_normal = Normal::new(0.0, 1.0).expect("valid normal");
    let noise = Normal::new(0.0, 0.5).expect("valid normal");
    let factor = Normal::new(0.0, std::f64::consts::FRAC_1_SQRT_2).expect("valid normal");

    let catalog = 2 * n;
    let mut groups: Vec<Group> = (0..catalog)
        .map(|i| if i < 2 * n_a { Group::A } else { Group::B })
        .collect();
    groups.shuffle(&mut rng);
    let base: Vec<f64> = groups
        .iter()
        .map(|&g| {
            let q = std_normal.sample(&mut rng);
            if g == Group::A {
                q - spec.bias
            } else {
                q
            }
        })
        .collect();
    let item_factors: Vec<[f64; 2]> = (0..catalog)
        .map(|_| [factor.sample(&mut rng), factor.sample(&mut rng)])
        .collect();
    let pool_a: Vec<usize> = (0..catalog).filter(|&i| groups[i] == Group::A).collect();
    let pool_b: Vec<usize> = (0..catalog).filter(|&i| groups[i] == Group::B).collect();

    let mut queries = Vec::with_capacity(spec.num_queries);
    for qi in 0..spec.num_queries {
        let pref = [factor.sample(&mut rng), factor.sample(&mut rng)];
        let mut chosen: Vec<usize> = index::sample(&mut rng, pool_a.len(), n_a)
            .into_iter()
            .map(|k| pool_a[k])
            .chain(
                index::sample(&mut rng, pool_b.len(), n_b)
                    .into_iter()
                    .map(|k| pool_b[k]),
            )
            .collect();
        chosen.shuffle(&mut rng);
        let items = chosen
            .into_iter()
            .map(|i| {
                let f = item_factors[i];
                let quality = base[i] + 0.5 * (pref[0] * f[0] + pref[1] * f[1]);
                let rel = (quality + noise.sample(&mut rng)).round().clamp(0.0, 4.0);
                Item {
                    item: i,
                    relevance: rel,
                    group: groups[i],
                }
            })
            .collect();
        queries.push(QueryGroup {
            id: format!("q{qi}"),
            index: qi,
            items,
        });
    }
    let names = (0..catalog).map(|i| format!("i{i}")).collect();
    Dataset::new(queries, names, groups, spec.num_queries)
}

/// Result of a per-query train/validation/test split.
#[derive(Clone, Debug)]
pub struct Split {
    pub train: Dataset,
    pub valid: Dataset,
    pub test: Dataset,
    /// Queries too small to split; their items all went to `train`.
    pub warnings: usize,
}

/// Splits each query's item list into disjoint train/validation/test parts.
///
/// Validation and test receive `max(1, round(f * n))` items each; queries with
/// fewer than three items go entirely to train and are counted in `warnings`.
pub fn split(d: &Dataset, fractions: (f64, f64, f64), seed: u64) -> Result<Split> {
    let (ft, fv, fs) = fractions;
    if !(ft > 0.0 && fv > 0.0 && fs > 0.0) || ((ft + fv + fs) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions must be positive and sum to 1, got ({ft}, {fv}, {fs})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::with_capacity(d.num_queries());
    let mut valid = Vec::with_capacity(d.num_queries());
    let mut test = Vec::with_capacity(d.num_queries());
    let mut warnings = 0;
    for q in d.queries() {
        let n = q.len();
        if n < 3 {
            warnings += 1;
            train.push(q.clone());
            continue;
        }
        let mut n_valid = ((fv * n as f64).round() as usize).max(1);
        let mut n_test = ((fs * n as f64).round() as usize).max(1);
        while n_valid + n_test >= n {
            if n_valid >= n_test {
                n_valid -= 1;
            } else {
                n_test -= 1;
            }
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let take = |range: &[usize]| {
            let mut pos = range.to_vec();
            pos.sort_unstable();
            QueryGroup {
                id: q.id.clone(),
                index: q.index,
                items: pos.into_iter().map(|p| q.items[p].clone()).collect(),
            }
        };
        let n_train = n - n_valid - n_test;
        train.push(take(&order[..n_train]));
        valid.push(take(&order[n_train..n_train + n_valid]));
        test.push(take(&order[n_train + n_valid..]));
    }
    Ok(Split {
        train: d.with_queries(train),
        valid: d.with_queries(valid),
        test: d.with_queries(test),
        warnings,
    })
}

/// Requested minibatch sizes: pairs `|B|`, per-query items `|B_q|`, and group
/// sub-batches `|B_a|`, `|B_b|`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSizes {
    pub pairs: usize,
    pub per_query: usize,
    pub group_a: usize,
    pub group_b: usize,
}

impl BatchSizes {
    /// Sizes large enough that every sub-batch is the full source set.
    pub fn full(d: &Dataset) -> BatchSizes {
        let max_q = d.queries().iter().map(QueryGroup::len).max().unwrap_or(1);
        BatchSizes {
            pairs: d.total_pairs().max(1),
            per_query: max_q.max(1),
            group_a: max_q.max(1),
            group_b: max_q.max(1),
        }
    }
}

/// Sub-batches drawn for one query of the pair batch. All indices are
/// positions into the query's `items`.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryBatch {
    /// Position of the query in `Dataset::queries()`.
    pub query: usize,
    /// Items of this query that were drawn into the pair batch `B`.
    pub pairs: Vec<usize>,
    pub items: Vec<usize>,
    pub group_a: Vec<usize>,
    pub group_b: Vec<usize>,
    /// Set when a group is empty for this query (or groups were not drawn).
    pub fairness_skipped: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchSample {
    /// One entry per distinct query in `B`, in ascending query position.
    pub queries: Vec<QueryBatch>,
}

impl BatchSample {
    pub fn num_pairs(&self) -> usize {
        self.queries.iter().map(|q| q.pairs.len()).sum()
    }

    /// `(query position, item position)` for every pair in `B`.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.queries
            .iter()
            .flat_map(|qb| qb.pairs.iter().map(move |&p| (qb.query, p)))
    }

    /// The batch that covers every pair and every item of `d`.
    pub fn full(d: &Dataset) -> BatchSample {
        let queries = d
            .queries()
            .iter()
            .enumerate()
            .map(|(pos, q)| QueryBatch {
                query: pos,
                pairs: (0..q.len()).collect(),
                items: (0..q.len()).collect(),
                group_a: q.members(Group::A),
                group_b: q.members(Group::B),
                fairness_skipped: !q.has_both_groups(),
            })
            .collect();
        BatchSample { queries }
    }
}

fn draw_subset(rng: &mut impl Rng, source: &[usize], amount: usize) -> Vec<usize> {
    if amount >= source.len() {
        return source.to_vec();
    }
    index::sample(rng, source.len(), amount)
        .into_iter()
        .map(|k| source[k])
        .collect()
}

/// Draws `B` uniformly without replacement from all pairs, then per-query
/// sub-batches from `S_q`, `S_a^q`, `S_b^q`, each capped at its source size.
pub fn sample_batch(d: &Dataset, sizes: BatchSizes, rng: &mut impl Rng) -> BatchSample {
    sample_batch_with(d, sizes, true, rng)
}

/// As [`sample_batch`]; with `draw_groups == false` the group sub-batches are
/// left empty and no randomness is spent on them.
pub fn sample_batch_with(
    d: &Dataset,
    sizes: BatchSizes,
    draw_groups: bool,
    rng: &mut impl Rng,
) -> BatchSample {
    let total = d.total_pairs();
    let mut per_query: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    let picks: Vec<usize> = if sizes.pairs >= total {
        (0..total).collect()
    } else {
        index::sample(rng, total, sizes.pairs.max(1)).into_vec()
    };
    for pair in picks {
        let (q, pos) = d.pair_at(pair);
        per_query.entry(q).or_default().push(pos);
    }
    let queries = per_query
        .into_iter()
        .map(|(qpos, pairs)| {
            let q = &d.queries()[qpos];
            let all: Vec<usize> = (0..q.len()).collect();
            let items = draw_subset(rng, &all, sizes.per_query.max(1));
            let (group_a, group_b, skipped) = if draw_groups {
                let a = q.members(Group::A);
                let b = q.members(Group::B);
                let skipped = a.is_empty() || b.is_empty();
                let ba = draw_subset(rng, &a, sizes.group_a.max(1));
                let bb = draw_subset(rng, &b, sizes.group_b.max(1));
                (ba, bb, skipped)
            } else {
                (Vec::new(), Vec::new(), true)
            };
            QueryBatch {
                query: qpos,
                pairs,
                items,
                group_a,
                group_b,
                fairness_skipped: skipped,
            }
        })
        .collect();
    BatchSample { queries }
}
