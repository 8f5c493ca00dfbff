//! Importance-ranked token retention with grid-based merge-and-recycle.
//!
//! Retention keeps the top-k tokens by importance (ties to the smaller
//! position ID) and always emits survivors in ascending position-ID order.
//! At the initial stage the pruned tokens are grouped into square grid
//! cells and fused into one recycled token per cell by importance-weighted
//! averaging; the fused token takes over the position of the cell's most
//! important pruned token and inherits that token's importance.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// One visual token flowing through the pruning stages.
#[derive(Debug, Clone, PartialEq)]
pub struct Token {
    /// Original sequence index; never renumbered by pruning.
    pub position_id: usize,
    /// Patch-grid coordinates `(x, y)`.
    pub coord: (usize, usize),
    /// Representation vector (model hidden dimension).
    pub rep: Vec<f32>,
    pub importance: f64,
}

/// Tokens ordered by ascending position ID plus their grid extent.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSet {
    pub tokens: Vec<Token>,
    pub grid_cols: usize,
    pub grid_rows: usize,
}

impl TokenSet {
    pub fn new(tokens: Vec<Token>, grid_cols: usize, grid_rows: usize) -> Result<Self> {
        for pair in tokens.windows(2) {
            if pair[0].position_id >= pair[1].position_id {
                return Err(Error::InvalidArgument(
                    "tokens must be strictly ascending by position_id".into(),
                ));
            }
        }
        for token in &tokens {
            if token.coord.0 >= grid_cols || token.coord.1 >= grid_rows {
                return Err(Error::InvalidArgument(format!(
                    "token {} coordinate {:?} outside {}x{} grid",
                    token.position_id, token.coord, grid_cols, grid_rows
                )));
            }
            if !token.importance.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "token {} has non-finite importance",
                    token.position_id
                )));
            }
        }
        Ok(Self {
            tokens,
            grid_cols,
            grid_rows,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn position_ids(&self) -> Vec<usize> {
        self.tokens.iter().map(|t| t.position_id).collect()
    }

    fn empty_like(&self) -> Self {
        Self {
            tokens: Vec::new(),
            grid_cols: self.grid_cols,
            grid_rows: self.grid_rows,
        }
    }
}

/// Result of one pruning stage.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneOutcome {
    /// Survivors (plus any recycled tokens), ascending position IDs.
    pub retained: TokenSet,
    /// Tokens removed from the sequence. Position IDs reused by recycled
    /// tokens are not listed here; retained and pruned partition the input.
    pub pruned: TokenSet,
    /// Recycled tokens created by cell merging; also present in `retained`.
    pub merged: Vec<Token>,
    /// The requested top-k count, before recycling added tokens back.
    pub nominal_count: usize,
    /// Cells whose importances were all zero and fell back to the plain mean.
    pub zero_weight_cells: usize,
}

/// Indices (into `items`) of the `k` entries with the highest importance,
/// ties broken by the smaller position ID. The result is sorted so that the
/// selected tokens stay in their original order.
pub(crate) fn select_topk_indices(items: &[(usize, f64)], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&p, &q| {
        items[q]
            .1
            .total_cmp(&items[p].1)
            .then(items[p].0.cmp(&items[q].0))
    });
    let mut chosen: Vec<usize> = order.into_iter().take(k).collect();
    chosen.sort_unstable();
    chosen
}

/// Keep the `k` most important tokens; no recycling.
pub fn topk_retain(ts: &TokenSet, k: usize) -> Result<PruneOutcome> {
    if k == 0 || k > ts.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} outside 1..={}",
            ts.len()
        )));
    }
    let ranked: Vec<(usize, f64)> = ts
        .tokens
        .iter()
        .map(|t| (t.position_id, t.importance))
        .collect();
    let keep = select_topk_indices(&ranked, k);
    let mut retained = ts.empty_like();
    let mut pruned = ts.empty_like();
    let mut keep_iter = keep.iter().peekable();
    for (idx, token) in ts.tokens.iter().enumerate() {
        if keep_iter.peek() == Some(&&idx) {
            keep_iter.next();
            retained.tokens.push(token.clone());
        } else {
            pruned.tokens.push(token.clone());
        }
    }
    Ok(PruneOutcome {
        retained,
        pruned,
        merged: Vec::new(),
        nominal_count: k,
        zero_weight_cells: 0,
    })
}

/// Group pruned tokens by grid cell `(floor(x / a), floor(y / a))`.
pub fn assign_grid_cells(pruned: &TokenSet, a: usize) -> BTreeMap<(usize, usize), Vec<Token>> {
    assert!(a >= 1, "grid size must be at least 1");
    let mut cells: BTreeMap<(usize, usize), Vec<Token>> = BTreeMap::new();
    for token in &pruned.tokens {
        let cell = (token.coord.0 / a, token.coord.1 / a);
        cells.entry(cell).or_default().push(token.clone());
    }
    cells
}

/// Fuse each cell into one token by importance-weighted averaging.
///
/// The fused token sits at the position (and coordinate) of the cell's
/// highest-importance member and carries that member's importance, so it
/// competes in later stages on behalf of the strongest token it replaced.
/// A cell whose importances are all zero falls back to the unweighted mean;
/// the second return value counts those cells.
pub fn merge_recycle(cells: &BTreeMap<(usize, usize), Vec<Token>>) -> (Vec<Token>, usize) {
    let mut fused = Vec::with_capacity(cells.len());
    let mut zero_weight_cells = 0;
    for members in cells.values() {
        assert!(!members.is_empty(), "cells are non-empty by construction");
        let total: f64 = members.iter().map(|t| t.importance).sum();
        let uniform = 1.0 / members.len() as f64;
        if total <= 0.0 {
            zero_weight_cells += 1;
        }
        let dim = members[0].rep.len();
        let mut rep = vec![0.0f64; dim];
        for token in members {
            // Normalizing first keeps a single-member cell bit-exact
            // (weight I/I = 1) and makes the fusion scale-free.
            let w = if total > 0.0 {
                token.importance / total
            } else {
                uniform
            };
            for (acc, &v) in rep.iter_mut().zip(&token.rep) {
                *acc += w * v as f64;
            }
        }
        let anchor = members
            .iter()
            .max_by(|p, q| {
                p.importance
                    .total_cmp(&q.importance)
                    .then(q.position_id.cmp(&p.position_id))
            })
            .expect("non-empty cell");
        fused.push(Token {
            position_id: anchor.position_id,
            coord: anchor.coord,
            rep: rep.into_iter().map(|v| v as f32).collect(),
            importance: anchor.importance,
        });
    }
    (fused, zero_weight_cells)
}

/// One full pruning stage: top-k retention, then (optionally) grid-based
/// recycling of the pruned tokens back into the retained set.
///
/// Recycling is meant for the initial stage only; later stages prune
/// without merging.
pub fn apply_stage_prune(ts: &TokenSet, k: usize, recycle: bool, a: usize) -> Result<PruneOutcome> {
    let mut outcome = topk_retain(ts, k)?;
    if !recycle || outcome.pruned.is_empty() {
        return Ok(outcome);
    }
    if a == 0 {
        return Err(Error::InvalidArgument(
            "grid size a must be at least 1".into(),
        ));
    }
    let cells = assign_grid_cells(&outcome.pruned, a);
    let (merged, zero_weight_cells) = merge_recycle(&cells);

    let recycled_ids: Vec<usize> = merged.iter().map(|t| t.position_id).collect();
    outcome
        .pruned
        .tokens
        .retain(|t| !recycled_ids.contains(&t.position_id));
    outcome.retained.tokens.extend(merged.iter().cloned());
    outcome.retained.tokens.sort_by_key(|t| t.position_id);
    outcome.merged = merged;
    outcome.zero_weight_cells = zero_weight_cells;
    Ok(outcome)
}
