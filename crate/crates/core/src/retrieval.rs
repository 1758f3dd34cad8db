//! Category-to-image retrieval in the joint embedding space, CMC / mAP,
//! and the similarity-vs-δ rank correlation diagnostic.

use std::collections::BTreeSet;
use std::io::Write;

use ndarray::{Array1, Array2, ArrayView1};
use serde::Serialize;

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::objective::{delta, UNIT_NORM_TOL};
use crate::schema::{AttributeSchema, PersonCategory};

/// A category query in which some groups may be left blank.
///
/// Blank groups are encoded as all-zero slices and ignored when deciding
/// relevance.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CategoryQuery {
    bits: Vec<u8>,
    /// Per bit: whether its group is specified.
    mask: Vec<bool>,
}

impl CategoryQuery {
    pub fn full(category: &PersonCategory) -> Self {
        Self {
            bits: category.bits().to_vec(),
            mask: vec![true; category.dim()],
        }
    }

    /// Parses `group:attribute` pairs separated by commas. Groups that are
    /// not mentioned, or given as `group:` with nothing after the colon,
    /// are blank.
    pub fn parse(schema: &AttributeSchema, spec: &str) -> Result<Self> {
        let mut bits = vec![0u8; schema.dim()];
        let mut mask = vec![false; schema.dim()];
        let mut seen = BTreeSet::new();
        for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (group, attribute) = part.split_once(':').ok_or_else(|| {
                Error::Category(format!("query term '{part}' is not of the form group:attribute"))
            })?;
            let (group, attribute) = (group.trim(), attribute.trim());
            let g = schema
                .group_index(group)
                .ok_or_else(|| Error::Category(format!("unknown group '{group}' in query")))?;
            if !seen.insert(g) {
                return Err(Error::Category(format!("group '{group}' given twice in query")));
            }
            if attribute.is_empty() {
                continue;
            }
            let range = schema.group_range(g);
            let a = schema.groups()[g]
                .attributes
                .iter()
                .position(|x| x == attribute)
                .ok_or_else(|| {
                    Error::Category(format!("unknown attribute '{attribute}' in group '{group}'"))
                })?;
            bits[range.start + a] = 1;
            mask[range].fill(true);
        }
        Ok(Self { bits, mask })
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn is_full(&self) -> bool {
        self.mask.iter().all(|&m| m)
    }

    /// True when `category` agrees with every specified group.
    pub fn matches(&self, category: &PersonCategory) -> bool {
        category.dim() == self.bits.len()
            && self
                .bits
                .iter()
                .zip(&self.mask)
                .zip(category.bits())
                .all(|((q, &m), c)| !m || q == c)
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| f64::from(b)).collect()
    }
}

impl std::fmt::Display for CategoryQuery {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (b, m) in self.bits.iter().zip(&self.mask) {
            if *m {
                write!(f, "{b}")?;
            } else {
                f.write_str("_")?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gallery {
    ids: Vec<String>,
    embeddings: Array2<f64>,
    categories: Vec<PersonCategory>,
}

impl Gallery {
    pub fn new(ids: Vec<String>, embeddings: Array2<f64>, categories: Vec<PersonCategory>) -> Result<Self> {
        if ids.len() != embeddings.nrows() || ids.len() != categories.len() {
            return Err(Error::Dimension {
                context: "gallery rows",
                expected: ids.len(),
                got: embeddings.nrows().min(categories.len()),
            });
        }
        for (i, row) in embeddings.rows().into_iter().enumerate() {
            let norm = row.dot(&row).sqrt();
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::Data(format!(
                    "gallery embedding '{}' is not unit norm (|f| = {norm})",
                    ids[i]
                )));
            }
        }
        Ok(Self {
            ids,
            embeddings,
            categories,
        })
    }

    /// Embeds every sample of `splits` with the image encoder.
    pub fn from_dataset(state: &ModelState, dataset: &Dataset, splits: &[Split]) -> Result<Self> {
        let samples: Vec<_> = dataset
            .samples
            .iter()
            .filter(|s| splits.contains(&s.split))
            .collect();
        if samples.is_empty() {
            return Self::new(Vec::new(), Array2::zeros((0, state.embed_dim())), Vec::new());
        }
        let x = dataset.feature_matrix(samples.iter().copied());
        let embeddings = state.embed_features(x.view())?;
        Self::new(
            samples.iter().map(|s| s.id.clone()).collect(),
            embeddings,
            samples.iter().map(|s| s.category.clone()).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn categories(&self) -> &[PersonCategory] {
        &self.categories
    }

    pub fn embeddings(&self) -> &Array2<f64> {
        &self.embeddings
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalRun {
    pub query: CategoryQuery,
    /// Gallery ids, best first.
    pub ranking: Vec<String>,
    pub scores: Vec<f64>,
    /// Per ranked position: whether the item matches the query.
    pub relevance: Vec<bool>,
    /// Matching items in the whole gallery, ranked or not.
    pub n_relevant: usize,
}

/// Ranks the gallery by descending `⟨f, q⟩`; ties go to the smaller id.
/// `k = None` keeps the full ranking; larger `k` is clamped.
pub fn rank_gallery(
    query: &CategoryQuery,
    query_embedding: ArrayView1<'_, f64>,
    gallery: &Gallery,
    k: Option<usize>,
) -> Result<RetrievalRun> {
    if gallery.is_empty() {
        return Err(Error::Data("empty gallery".into()));
    }
    if query_embedding.len() != gallery.embeddings.ncols() {
        return Err(Error::Dimension {
            context: "query embedding",
            expected: gallery.embeddings.ncols(),
            got: query_embedding.len(),
        });
    }
    let scores: Array1<f64> = gallery.embeddings.dot(&query_embedding);
    let mut order: Vec<usize> = (0..gallery.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then_with(|| gallery.ids[a].cmp(&gallery.ids[b]))
    });
    let relevant: Vec<bool> = gallery.categories.iter().map(|c| query.matches(c)).collect();
    let n_relevant = relevant.iter().filter(|&&r| r).count();
    order.truncate(k.unwrap_or(usize::MAX).min(gallery.len()));
    Ok(RetrievalRun {
        query: query.clone(),
        ranking: order.iter().map(|&i| gallery.ids[i].clone()).collect(),
        scores: order.iter().map(|&i| scores[i]).collect(),
        relevance: order.iter().map(|&i| relevant[i]).collect(),
        n_relevant,
    })
}

/// Embeds `queries` with the category encoder and ranks the gallery for each.
pub fn retrieve_all(
    queries: &[CategoryQuery],
    state: &ModelState,
    gallery: &Gallery,
    k: Option<usize>,
) -> Result<Vec<RetrievalRun>> {
    if gallery.is_empty() {
        return Err(Error::Data("empty gallery".into()));
    }
    if queries.is_empty() {
        return Ok(Vec::new());
    }
    let dim = state.category_encoder.in_dim();
    let mut x = Array2::zeros((queries.len(), dim));
    for (mut row, q) in x.rows_mut().into_iter().zip(queries) {
        if q.bits.len() != dim {
            return Err(Error::Dimension {
                context: "query bits",
                expected: dim,
                got: q.bits.len(),
            });
        }
        row.assign(&Array1::from(q.to_f64()));
    }
    let g = state.category_encoder.forward_batch(x.view())?.output;
    queries
        .iter()
        .zip(g.rows())
        .map(|(q, row)| rank_gallery(q, row, gallery, k))
        .collect()
}

pub fn retrieve(query: &CategoryQuery, state: &ModelState, gallery: &Gallery, k: Option<usize>) -> Result<RetrievalRun> {
    Ok(retrieve_all(std::slice::from_ref(query), state, gallery, k)?.remove(0))
}

fn check_runs(runs: &[RetrievalRun]) -> Result<()> {
    if runs.is_empty() {
        return Err(Error::Data("no retrieval runs".into()));
    }
    if let Some(r) = runs.iter().find(|r| r.n_relevant == 0) {
        return Err(Error::Data(format!(
            "query {} has no relevant gallery item",
            r.query
        )));
    }
    Ok(())
}

/// Fraction of runs with a relevant item in the top `k`.
pub fn cmc(runs: &[RetrievalRun], k: usize) -> Result<f64> {
    if k < 1 {
        return Err(Error::Config("rank k must be >= 1".into()));
    }
    check_runs(runs)?;
    let hits = runs
        .iter()
        .filter(|r| r.relevance.iter().take(k).any(|&x| x))
        .count();
    Ok(hits as f64 / runs.len() as f64)
}

/// Uninterpolated average precision: mean of precision at each relevant
/// position, over all relevant items.
pub fn average_precision(run: &RetrievalRun) -> Result<f64> {
    if run.n_relevant == 0 {
        return Err(Error::Data(format!(
            "query {} has no relevant gallery item",
            run.query
        )));
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (pos, &rel) in run.relevance.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (pos + 1) as f64;
        }
    }
    Ok(sum / run.n_relevant as f64)
}

pub fn mean_ap(runs: &[RetrievalRun]) -> Result<f64> {
    check_runs(runs)?;
    let mut total = 0.0;
    for r in runs {
        total += average_precision(r)?;
    }
    Ok(total / runs.len() as f64)
}

/// Ranks starting at 1; tied values share the mean of their ranks.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

/// Spearman rank correlation; `None` when either input is constant or
/// shorter than 2.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<Option<f64>> {
    if x.len() != y.len() {
        return Err(Error::Dimension {
            context: "spearman inputs",
            expected: x.len(),
            got: y.len(),
        });
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("spearman input".into()));
    }
    if x.len() < 2 {
        return Ok(None);
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(None);
    }
    Ok(Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairRow {
    pub cat_i: String,
    pub cat_j: String,
    pub s: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentDiagnostic {
    /// `None` when either column is constant.
    pub spearman_rho: Option<f64>,
    pub pairs: Vec<PairRow>,
}

/// Rank correlation between prototype cosine similarity and δ (under the
/// model's own Hamming weights) over all category pairs.
pub fn semantic_alignment_diagnostic(
    state: &ModelState,
    categories: &[PersonCategory],
) -> Result<AlignmentDiagnostic> {
    if categories.len() < 3 {
        return Err(Error::Data(format!(
            "diagnostic needs at least 3 categories, got {}",
            categories.len()
        )));
    }
    let g = state.embed_categories(categories)?;
    let mut pairs = Vec::with_capacity(categories.len() * (categories.len() - 1) / 2);
    for i in 0..categories.len() {
        for j in i + 1..categories.len() {
            pairs.push(PairRow {
                cat_i: categories[i].to_string(),
                cat_j: categories[j].to_string(),
                s: g.row(i).dot(&g.row(j)),
                delta: delta(&categories[i], &categories[j], &state.hamming_weights)?,
            });
        }
    }
    let s: Vec<f64> = pairs.iter().map(|p| p.s).collect();
    let d: Vec<f64> = pairs.iter().map(|p| p.delta).collect();
    Ok(AlignmentDiagnostic {
        spearman_rho: spearman(&s, &d)?,
        pairs,
    })
}

pub fn write_pairs_csv(pairs: &[PairRow], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "cat_i,cat_j,s,delta")?;
    for p in pairs {
        writeln!(out, "{},{},{},{}", p.cat_i, p.cat_j, p.s, p.delta)?;
    }
    Ok(())
}

/// One line of a metrics report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub metric: String,
    pub k: Option<usize>,
    pub split: String,
    /// `None` for an undefined value.
    pub value: Option<f64>,
}

impl MetricRow {
    fn new(metric: &str, k: Option<usize>, split: &str, value: Option<f64>) -> Self {
        Self {
            metric: metric.into(),
            k,
            split: split.into(),
            value,
        }
    }
}

pub const METRICS_HEADER: &str = "metric,k,split,value";

pub fn write_metrics_csv(rows: &[MetricRow], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for r in rows {
        let k = r.k.map(|k| k.to_string()).unwrap_or_default();
        let v = r.value.map_or_else(|| "undefined".to_string(), |v| v.to_string());
        writeln!(out, "{},{},{},{}", r.metric, k, r.split, v)?;
    }
    Ok(())
}

/// Evaluation split: a gallery drawn from `splits`, queried by every
/// category that occurs in it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalSplit {
    pub name: &'static str,
    pub splits: &'static [Split],
}

pub const EVAL_SPLITS: [EvalSplit; 3] = [
    EvalSplit {
        name: "seen",
        splits: &[Split::TestSeen],
    },
    EvalSplit {
        name: "unseen",
        splits: &[Split::TestUnseen],
    },
    EvalSplit {
        name: "all",
        splits: &[Split::TestSeen, Split::TestUnseen],
    },
];

/// Rank-k and mAP of one evaluation split.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitMetrics {
    pub split: String,
    pub ranks: Vec<(usize, f64)>,
    pub map: f64,
    pub n_queries: usize,
    /// Queries dropped for having no match in the gallery.
    pub excluded: usize,
}

impl SplitMetrics {
    pub fn rank(&self, k: usize) -> Option<f64> {
        self.ranks.iter().find(|(kk, _)| *kk == k).map(|(_, v)| *v)
    }
}

pub fn evaluate_split(
    state: &ModelState,
    dataset: &Dataset,
    split: &EvalSplit,
    ks: &[usize],
) -> Result<Option<SplitMetrics>> {
    let gallery = Gallery::from_dataset(state, dataset, split.splits)?;
    if gallery.is_empty() {
        return Ok(None);
    }
    let queries: Vec<CategoryQuery> = dataset
        .categories_in(split.splits)
        .iter()
        .map(CategoryQuery::full)
        .collect();
    let runs = retrieve_all(&queries, state, &gallery, None)?;
    let (kept, dropped): (Vec<_>, Vec<_>) = runs.into_iter().partition(|r| r.n_relevant > 0);
    if kept.is_empty() {
        return Ok(None);
    }
    let ranks = ks
        .iter()
        .map(|&k| Ok((k, cmc(&kept, k)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Some(SplitMetrics {
        split: split.name.into(),
        ranks,
        map: mean_ap(&kept)?,
        n_queries: kept.len(),
        excluded: dropped.len(),
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub splits: Vec<SplitMetrics>,
    pub diagnostic: AlignmentDiagnostic,
}

impl EvalReport {
    pub fn split(&self, name: &str) -> Option<&SplitMetrics> {
        self.splits.iter().find(|s| s.split == name)
    }

    pub fn rows(&self) -> Vec<MetricRow> {
        let mut rows = Vec::new();
        for s in &self.splits {
            for &(k, v) in &s.ranks {
                rows.push(MetricRow::new("rank", Some(k), &s.split, Some(v)));
            }
            rows.push(MetricRow::new("map", None, &s.split, Some(s.map)));
            rows.push(MetricRow::new("n_queries", None, &s.split, Some(s.n_queries as f64)));
            rows.push(MetricRow::new("excluded_queries", None, &s.split, Some(s.excluded as f64)));
        }
        rows.push(MetricRow::new(
            "spearman_rho",
            None,
            "categories",
            self.diagnostic.spearman_rho,
        ));
        rows
    }
}

/// Rank-k and mAP on the seen, unseen and combined test splits, plus the
/// diagnostic over every category in the dataset.
pub fn evaluate(state: &ModelState, dataset: &Dataset, ks: &[usize]) -> Result<EvalReport> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Config("ks must be non-empty and >= 1".into()));
    }
    if ks.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("ks must be strictly ascending".into()));
    }
    let mut splits = Vec::new();
    for split in &EVAL_SPLITS {
        if let Some(m) = evaluate_split(state, dataset, split, ks)? {
            splits.push(m);
        }
    }
    let diagnostic = semantic_alignment_diagnostic(state, &dataset.all_categories())?;
    Ok(EvalReport { splits, diagnostic })
}
