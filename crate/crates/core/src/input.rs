//! Turns tokenized users into encoder inputs, samples mask plans and builds
//! multi-hot reconstruction targets.
//!
//! Layout of every sequence: `[CLS] + long words + short words + profile tokens`.
//! A behavioral token is `fuse(mean_a concat_k E_k[id_ak]) + pos + seg`;
//! profile tokens and the CLS token get no position term.

use std::fmt::Write as _;

use rand::Rng;

use crate::error::{Error, Result};
use crate::float::Scalar;
use crate::params::{ModelConfig, Parameters};
use crate::tensor::{gemm_nt, gemm_tn, Matrix};
use crate::tokenizer::{EncodedWord, TokenizedUser};
use crate::vocab::SegmentKind;

pub const MASK_SELECT_PROB: f64 = 0.15;
pub const MASK_ZERO_PROB: f64 = 0.8;

#[derive(Debug, Clone, PartialEq)]
pub enum TokenSource {
    Cls,
    /// Index into the (truncated) word list of the segment.
    Behavioral {
        kind: SegmentKind,
        word: usize,
    },
    Profile {
        attribute: usize,
        id: u32,
    },
}

/// How a row of the input was finally formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowState {
    Full,
    /// Entire summed vector replaced by zeros.
    Zeroed,
    /// Token term removed, position and segment terms kept.
    TokenZeroed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InputSequence<F> {
    pub user_id: String,
    /// `T_total x H` summed input vectors.
    pub embeddings: Matrix<F>,
    pub position_indices: Vec<u32>,
    pub segments: Vec<SegmentKind>,
    pub sources: Vec<TokenSource>,
    pub row_states: Vec<RowState>,
    /// Number of behavioral tokens (`t`).
    pub num_behavioral: usize,
    /// Words kept after truncation, per behavior segment.
    pub long_words: Vec<EncodedWord>,
    pub short_words: Vec<EncodedWord>,
    /// Mean of concatenated attribute embeddings per behavioral row, by segment.
    concat_means: [Matrix<F>; 2],
}

impl<F: Scalar> InputSequence<F> {
    pub fn len(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn words(&self, kind: SegmentKind) -> &[EncodedWord] {
        match kind {
            SegmentKind::LongTerm => &self.long_words,
            SegmentKind::ShortTerm => &self.short_words,
            SegmentKind::UserProfile => &[],
        }
    }

    /// Row range of the behavioral tokens of a segment.
    pub fn segment_rows(&self, kind: SegmentKind) -> std::ops::Range<usize> {
        let nl = self.long_words.len();
        match kind {
            SegmentKind::LongTerm => 1..1 + nl,
            SegmentKind::ShortTerm => 1 + nl..1 + nl + self.short_words.len(),
            SegmentKind::UserProfile => 1 + self.num_behavioral..self.len(),
        }
    }

    pub fn is_behavioral_row(&self, row: usize) -> bool {
        (1..1 + self.num_behavioral).contains(&row)
    }
}

fn check_ids(word: &EncodedWord, sizes: &[usize], kind: SegmentKind) -> Result<()> {
    if word.actions.is_empty() {
        return Err(Error::Contract(format!("empty {kind} word")));
    }
    for action in &word.actions {
        if action.len() != sizes.len() {
            return Err(Error::Shape(format!(
                "{kind} action has {} ids, expected {}",
                action.len(),
                sizes.len()
            )));
        }
        for (&id, &n) in action.iter().zip(sizes) {
            if id as usize >= n {
                return Err(Error::Shape(format!(
                    "{kind} id {id} out of bounds for vocabulary of {n}"
                )));
            }
        }
    }
    Ok(())
}

/// Mean over actions of concatenated attribute embeddings (before fusion).
pub fn concat_mean<F: Scalar>(word: &EncodedWord, tables: &[Matrix<F>], out: &mut [F]) {
    out.iter_mut().for_each(|x| *x = F::ZERO);
    let inv = F::ONE / F::of(word.actions.len() as f64);
    for action in &word.actions {
        let mut offset = 0;
        for (k, &id) in action.iter().enumerate() {
            let row = tables[k].row(id as usize);
            for (o, &v) in out[offset..offset + row.len()].iter_mut().zip(row) {
                *o += v * inv;
            }
            offset += row.len();
        }
    }
}

/// Fused token vector of one behavioral word (no position/segment terms).
pub fn build_token_embedding<F: Scalar>(
    word: &EncodedWord,
    kind: SegmentKind,
    params: &Parameters<F>,
) -> Result<Vec<F>> {
    let s = kind.index();
    if s > 1 {
        return Err(Error::Contract(
            "profile tokens are not behavioral words".into(),
        ));
    }
    let tables = &params.attribute_embeddings[s];
    let sizes: Vec<usize> = tables.iter().map(Matrix::rows).collect();
    check_ids(word, &sizes, kind)?;
    let mut c = vec![F::ZERO; params.fusion[s].rows()];
    concat_mean(word, tables, &mut c);
    let c = Matrix::from_vec(1, c.len(), c)?;
    Ok(c.matmul(&params.fusion[s]).into_vec())
}

fn keep_latest(words: &[EncodedWord], max: usize) -> Vec<EncodedWord> {
    words[words.len().saturating_sub(max)..].to_vec()
}

/// Builds the summed input vectors of a user.
pub fn assemble_input_sequence<F: Scalar>(
    user: &TokenizedUser,
    params: &Parameters<F>,
    config: &ModelConfig,
) -> Result<InputSequence<F>> {
    let h = params.hidden();
    let long_words = keep_latest(&user.long_words, config.max_long_words);
    let short_words = keep_latest(&user.short_words, config.max_short_words);
    let num_profile = user.profile_token_ids.len();
    if num_profile != params.profile_embeddings.len() {
        return Err(Error::Shape(format!(
            "user {} has {num_profile} profile tokens, model expects {}",
            user.user_id,
            params.profile_embeddings.len()
        )));
    }
    let num_behavioral = long_words.len() + short_words.len();
    let total = 1 + num_behavioral + num_profile;
    let mut embeddings = Matrix::zeros(total, h);
    let mut position_indices = Vec::with_capacity(total);
    let mut segments = Vec::with_capacity(total);
    let mut sources = Vec::with_capacity(total);

    // CLS: classification-token embedding plus the profile segment embedding.
    let seg_profile = params
        .segment_embeddings
        .row(SegmentKind::UserProfile.index());
    for ((o, &c), &s) in embeddings
        .row_mut(0)
        .iter_mut()
        .zip(params.cls_embedding.row(0))
        .zip(seg_profile)
    {
        *o = c + s;
    }
    position_indices.push(0);
    segments.push(SegmentKind::UserProfile);
    sources.push(TokenSource::Cls);

    let mut concat_means = [Matrix::zeros(0, 0), Matrix::zeros(0, 0)];
    let mut row = 1;
    for (kind, words) in [
        (SegmentKind::LongTerm, &long_words),
        (SegmentKind::ShortTerm, &short_words),
    ] {
        let s = kind.index();
        let tables = &params.attribute_embeddings[s];
        let sizes: Vec<usize> = tables.iter().map(Matrix::rows).collect();
        let width = params.fusion[s].rows();
        let mut means = Matrix::zeros(words.len(), width);
        for (j, w) in words.iter().enumerate() {
            check_ids(w, &sizes, kind)?;
            concat_mean(w, tables, means.row_mut(j));
        }
        let fused = means.matmul(&params.fusion[s]);
        let max_pos = config.max_positions(kind);
        for (j, w) in words.iter().enumerate() {
            let pos = if (w.position as usize) < max_pos {
                w.position as usize
            } else {
                log::warn!(
                    "user {}: {kind} position {} clamped to {}",
                    user.user_id,
                    w.position,
                    max_pos - 1
                );
                max_pos - 1
            };
            let out = embeddings.row_mut(row);
            let p = params.position_embeddings[s].row(pos);
            let sg = params.segment_embeddings.row(s);
            for (i, o) in out.iter_mut().enumerate() {
                *o = fused.get(j, i) + p[i] + sg[i];
            }
            position_indices.push(pos as u32);
            segments.push(kind);
            sources.push(TokenSource::Behavioral { kind, word: j });
            row += 1;
        }
        concat_means[s] = means;
    }

    let seg_row = params
        .segment_embeddings
        .row(SegmentKind::UserProfile.index());
    for (k, &id) in user.profile_token_ids.iter().enumerate() {
        let table = &params.profile_embeddings[k];
        if id as usize >= table.rows() {
            return Err(Error::Shape(format!(
                "profile id {id} out of bounds for attribute {k}"
            )));
        }
        for ((o, &e), &s) in embeddings
            .row_mut(row)
            .iter_mut()
            .zip(table.row(id as usize))
            .zip(seg_row)
        {
            *o = e + s;
        }
        position_indices.push(0);
        segments.push(SegmentKind::UserProfile);
        sources.push(TokenSource::Profile { attribute: k, id });
        row += 1;
    }

    Ok(InputSequence {
        user_id: user.user_id.clone(),
        embeddings,
        position_indices,
        segments,
        sources,
        row_states: vec![RowState::Full; total],
        num_behavioral,
        long_words,
        short_words,
        concat_means,
    })
}

/// Accumulates into `grads` the gradient of the input assembly given the
/// gradient with respect to the (masked) input vectors.
pub fn backward_input<F: Scalar>(
    seq: &InputSequence<F>,
    d_embeddings: &Matrix<F>,
    params: &Parameters<F>,
    grads: &mut Parameters<F>,
) {
    let seg_profile = SegmentKind::UserProfile.index();
    for (row, src) in seq.sources.iter().enumerate() {
        let d = d_embeddings.row(row);
        match (src, seq.row_states[row]) {
            (_, RowState::Zeroed) => {}
            (TokenSource::Cls, _) => {
                acc(grads.cls_embedding.row_mut(0), d);
                acc(grads.segment_embeddings.row_mut(seg_profile), d);
            }
            (TokenSource::Profile { attribute, id }, _) => {
                acc(
                    grads.profile_embeddings[*attribute].row_mut(*id as usize),
                    d,
                );
                acc(grads.segment_embeddings.row_mut(seg_profile), d);
            }
            (TokenSource::Behavioral { kind, .. }, _) => {
                let s = kind.index();
                let pos = seq.position_indices[row] as usize;
                acc(grads.position_embeddings[s].row_mut(pos), d);
                acc(grads.segment_embeddings.row_mut(s), d);
            }
        }
    }

    for kind in [SegmentKind::LongTerm, SegmentKind::ShortTerm] {
        let s = kind.index();
        let rows = seq.segment_rows(kind);
        if rows.is_empty() {
            continue;
        }
        let h = params.hidden();
        let mut d_fused = Matrix::zeros(rows.len(), h);
        for (j, r) in rows.clone().enumerate() {
            if seq.row_states[r] == RowState::Full {
                d_fused.row_mut(j).copy_from_slice(d_embeddings.row(r));
            }
        }
        let means = &seq.concat_means[s];
        gemm_tn(F::ONE, means, &d_fused, F::ONE, &mut grads.fusion[s]);
        let mut d_means = Matrix::zeros(rows.len(), means.cols());
        gemm_nt(F::ONE, &d_fused, &params.fusion[s], F::ZERO, &mut d_means);
        for (j, word) in seq.words(kind).iter().enumerate() {
            if seq.row_states[rows.start + j] != RowState::Full {
                continue;
            }
            let inv = F::ONE / F::of(word.actions.len() as f64);
            let dm = d_means.row(j);
            for action in &word.actions {
                let mut offset = 0;
                for (k, &id) in action.iter().enumerate() {
                    let table = &mut grads.attribute_embeddings[s][k];
                    let width = table.cols();
                    for (g, &v) in table
                        .row_mut(id as usize)
                        .iter_mut()
                        .zip(&dm[offset..offset + width])
                    {
                        *g += v * inv;
                    }
                    offset += width;
                }
            }
        }
    }
}

fn acc<F: Scalar>(dst: &mut [F], src: &[F]) {
    for (a, &b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskAction {
    Zeroed,
    Kept,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    /// `(row, action)` sorted by row; rows are behavioral positions only.
    pub selected: Vec<(usize, MaskAction)>,
}

impl MaskPlan {
    pub fn to_log_line(&self, user_id: &str) -> String {
        let mut s = format!("{user_id}\t");
        for (i, (row, action)) in self.selected.iter().enumerate() {
            let tag = match action {
                MaskAction::Zeroed => 'z',
                MaskAction::Kept => 'k',
            };
            let _ = write!(s, "{}{row}{tag}", if i > 0 { "," } else { "" });
        }
        s
    }
}

/// Independent 15% selection per behavioral position; 80% of the selected
/// rows are zeroed. When nothing is selected one uniform position is forced
/// (zeroed).
pub fn sample_mask_plan<F: Scalar, R: Rng + ?Sized>(
    seq: &InputSequence<F>,
    rng: &mut R,
) -> Result<MaskPlan> {
    let t = seq.num_behavioral;
    if t == 0 {
        return Err(Error::Contract(format!(
            "user {} has no behavioral tokens to mask",
            seq.user_id
        )));
    }
    let mut selected = Vec::new();
    for row in 1..=t {
        if rng.random::<f64>() < MASK_SELECT_PROB {
            let action = if rng.random::<f64>() < MASK_ZERO_PROB {
                MaskAction::Zeroed
            } else {
                MaskAction::Kept
            };
            selected.push((row, action));
        }
    }
    if selected.is_empty() {
        selected.push((1 + rng.random_range(0..t), MaskAction::Zeroed));
    }
    Ok(MaskPlan { selected })
}

/// Multi-hot targets of one masked position, stored as sorted id sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedPosition {
    pub row: usize,
    pub kind: SegmentKind,
    /// Per attribute of the segment, the distinct ids present in the word.
    pub targets: Vec<Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MaskTarget {
    pub positions: Vec<MaskedPosition>,
}

impl MaskedPosition {
    /// Dense multi-hot vector of one attribute.
    pub fn multi_hot(&self, attribute: usize, vocab_size: usize) -> Vec<u8> {
        let mut v = vec![0u8; vocab_size];
        for &id in &self.targets[attribute] {
            v[id as usize] = 1;
        }
        v
    }
}

fn word_targets(word: &EncodedWord) -> Vec<Vec<u32>> {
    let arity = word.actions.first().map_or(0, Vec::len);
    (0..arity)
        .map(|k| {
            let mut ids: Vec<u32> = word.actions.iter().map(|a| a[k]).collect();
            ids.sort_unstable();
            ids.dedup();
            ids
        })
        .collect()
}

/// Applies a mask plan, returning the masked sequence and its targets.
pub fn apply_mask_and_targets<F: Scalar>(
    seq: &InputSequence<F>,
    plan: &MaskPlan,
    params: &Parameters<F>,
    config: &ModelConfig,
) -> Result<(InputSequence<F>, MaskTarget)> {
    let mut masked = seq.clone();
    let mut positions = Vec::with_capacity(plan.selected.len());
    let mut last = 0;
    for &(row, action) in &plan.selected {
        if !seq.is_behavioral_row(row) || row <= last {
            return Err(Error::Contract(format!(
                "mask plan row {row} is not an increasing behavioral position of user {}",
                seq.user_id
            )));
        }
        last = row;
        let (kind, word) = match &seq.sources[row] {
            TokenSource::Behavioral { kind, word } => (*kind, &seq.words(*kind)[*word]),
            _ => unreachable!("behavioral rows carry behavioral sources"),
        };
        if action == MaskAction::Zeroed {
            let out = masked.embeddings.row_mut(row);
            if config.mask_keep_position {
                let s = kind.index();
                let p = params.position_embeddings[s].row(seq.position_indices[row] as usize);
                let sg = params.segment_embeddings.row(s);
                for (i, o) in out.iter_mut().enumerate() {
                    *o = p[i] + sg[i];
                }
                masked.row_states[row] = RowState::TokenZeroed;
            } else {
                out.iter_mut().for_each(|x| *x = F::ZERO);
                masked.row_states[row] = RowState::Zeroed;
            }
        }
        positions.push(MaskedPosition {
            row,
            kind,
            targets: word_targets(word),
        });
    }
    Ok((masked, MaskTarget { positions }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{config, params, user, word};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Element-wise re-computation of `fuse(mean_a concat_k E_k[id_ak])`.
    fn brute_force_token(w: &EncodedWord, kind: SegmentKind, p: &Parameters<f64>) -> Vec<f64> {
        let s = kind.index();
        let mut concat = Vec::new();
        for (k, table) in p.attribute_embeddings[s].iter().enumerate() {
            for c in 0..table.cols() {
                let total: f64 = w.actions.iter().map(|a| table.get(a[k] as usize, c)).sum();
                concat.push(total / w.actions.len() as f64);
            }
        }
        let fusion = &p.fusion[s];
        (0..fusion.cols())
            .map(|j| {
                (0..fusion.rows())
                    .map(|i| concat[i] * fusion.get(i, j))
                    .sum()
            })
            .collect()
    }

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12) && a.len() == b.len()
    }

    #[test]
    fn token_embedding_matches_brute_force() {
        let p = params(1);
        let single = word(0, &[&[2, 5]]);
        let twice = word(0, &[&[2, 5], &[2, 5]]);
        let pair = word(0, &[&[2, 5], &[3, 1]]);
        let one = build_token_embedding(&single, SegmentKind::LongTerm, &p).unwrap();
        assert!(close(
            &one,
            &brute_force_token(&single, SegmentKind::LongTerm, &p)
        ));
        assert!(close(
            &one,
            &build_token_embedding(&twice, SegmentKind::LongTerm, &p).unwrap()
        ));
        let mixed = build_token_embedding(&pair, SegmentKind::LongTerm, &p).unwrap();
        assert!(close(
            &mixed,
            &brute_force_token(&pair, SegmentKind::LongTerm, &p)
        ));
    }

    #[test]
    fn out_of_bounds_id_is_rejected() {
        let p = params(1);
        let bad = word(0, &[&[2, 9]]);
        assert!(matches!(
            build_token_embedding(&bad, SegmentKind::LongTerm, &p),
            Err(Error::Shape(_))
        ));
        let mut u = user();
        u.short_words[0].actions[0][1] = 3;
        assert!(assemble_input_sequence(&u, &p, &config()).is_err());
    }

    #[test]
    fn layout_arithmetic() {
        let p = params(2);
        let u = user();
        let seq = assemble_input_sequence(&u, &p, &config()).unwrap();
        assert_eq!(seq.len(), 1 + 3 + 2 + 2);
        assert_eq!(seq.num_behavioral, 5);
        assert_eq!(seq.segment_rows(SegmentKind::LongTerm), 1..4);
        assert_eq!(seq.segment_rows(SegmentKind::ShortTerm), 4..6);
        assert_eq!(seq.segment_rows(SegmentKind::UserProfile), 6..8);
        assert_eq!(seq.sources[0], TokenSource::Cls);
        let kinds: Vec<usize> = seq.segments.iter().map(|k| k.index()).collect();
        assert_eq!(kinds, vec![2, 0, 0, 0, 1, 1, 2, 2]);

        let empty = TokenizedUser {
            long_words: Vec::new(),
            short_words: Vec::new(),
            ..u
        };
        let seq = assemble_input_sequence(&empty, &p, &config()).unwrap();
        assert_eq!((seq.len(), seq.num_behavioral), (3, 0));
    }

    #[test]
    fn truncation_keeps_latest_words() {
        let p = params(3);
        let mut u = user();
        u.long_words = (0..200).map(|d| word(d, &[&[1, 1 + d % 8]])).collect();
        let seq = assemble_input_sequence(&u, &p, &config()).unwrap();
        assert_eq!(seq.long_words.len(), 128);
        let kept: Vec<u32> = seq.long_words.iter().map(|w| w.position).collect();
        assert_eq!(kept, (72..200).collect::<Vec<_>>());
        assert_eq!(seq.position_indices[1], 72);
    }

    #[test]
    fn positions_beyond_table_are_clamped() {
        let p = params(3);
        let mut u = user();
        u.short_words = vec![word(500, &[&[1, 1, 1]])];
        let seq = assemble_input_sequence(&u, &p, &config()).unwrap();
        assert_eq!(seq.position_indices[4], 63);
    }

    #[test]
    fn input_is_sum_of_token_position_and_segment() {
        let mut p = params(4);
        let u = user();
        let cfg = config();
        p.position_embeddings.iter_mut().for_each(|m| m.fill(0.0));
        p.segment_embeddings.fill(0.0);
        let seq = assemble_input_sequence(&u, &p, &cfg).unwrap();
        for (j, w) in u.long_words.iter().enumerate() {
            let fused = build_token_embedding(w, SegmentKind::LongTerm, &p).unwrap();
            assert!(close(seq.embeddings.row(1 + j), &fused));
        }
        // Profile tokens carry no position term; CLS is the CLS row alone.
        assert_eq!(seq.embeddings.row(0), p.cls_embedding.row(0));
        assert_eq!(seq.embeddings.row(6), p.profile_embeddings[0].row(1));

        let full = params(4);
        let seq = assemble_input_sequence(&u, &full, &cfg).unwrap();
        let w = &u.short_words[1];
        let expected: Vec<f64> = build_token_embedding(w, SegmentKind::ShortTerm, &full)
            .unwrap()
            .iter()
            .zip(full.position_embeddings[1].row(4))
            .zip(full.segment_embeddings.row(1))
            .map(|((a, b), c)| a + b + c)
            .collect();
        assert!(close(seq.embeddings.row(5), &expected));
    }

    #[test]
    fn zero_tables_give_zero_inputs() {
        let mut p = params(5);
        p.for_each_mut(|_, _, m| m.fill(0.0));
        let seq = assemble_input_sequence(&user(), &p, &config()).unwrap();
        assert!(seq.embeddings.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn assembly_is_deterministic() {
        let p = params(6);
        let a = assemble_input_sequence(&user(), &p, &config()).unwrap();
        let b = assemble_input_sequence(&user(), &p, &config()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_behavioral_token_is_always_selected() {
        let p = params(7);
        let mut u = user();
        u.long_words.truncate(1);
        u.short_words.clear();
        let seq = assemble_input_sequence(&u, &p, &config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..500 {
            let plan = sample_mask_plan(&seq, &mut rng).unwrap();
            assert_eq!(plan.selected.len(), 1);
            assert_eq!(plan.selected[0].0, 1);
        }
    }

    #[test]
    fn no_behavioral_tokens_is_an_error() {
        let p = params(7);
        let mut u = user();
        u.long_words.clear();
        u.short_words.clear();
        let seq = assemble_input_sequence(&u, &p, &config()).unwrap();
        assert!(sample_mask_plan(&seq, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn plans_only_touch_behavioral_rows() {
        let p = params(8);
        let seq = assemble_input_sequence(&user(), &p, &config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10_000 {
            let plan = sample_mask_plan(&seq, &mut rng).unwrap();
            assert!(!plan.selected.is_empty());
            assert!(plan.selected.iter().all(|&(r, _)| seq.is_behavioral_row(r)));
            assert!(plan.selected.windows(2).all(|w| w[0].0 < w[1].0));
        }
    }

    #[test]
    fn masking_zeroes_and_keeps() {
        let p = params(9);
        let cfg = config();
        let u = user();
        let seq = assemble_input_sequence(&u, &p, &cfg).unwrap();
        let plan = MaskPlan {
            selected: vec![(2, MaskAction::Zeroed), (5, MaskAction::Kept)],
        };
        let (masked, targets) = apply_mask_and_targets(&seq, &plan, &p, &cfg).unwrap();
        assert!(masked.embeddings.row(2).iter().all(|&x| x == 0.0));
        assert_eq!(masked.row_states[2], RowState::Zeroed);
        for r in (0..seq.len()).filter(|&r| r != 2) {
            assert_eq!(masked.embeddings.row(r), seq.embeddings.row(r));
        }
        assert_eq!(targets.positions.len(), 2);
        // Long word 1 has actions (2,3) and (2,7).
        assert_eq!(targets.positions[0].kind, SegmentKind::LongTerm);
        assert_eq!(targets.positions[0].targets, vec![vec![2], vec![3, 7]]);
        let hot = targets.positions[0].multi_hot(1, 9);
        assert_eq!(hot, vec![0, 0, 0, 1, 0, 0, 0, 1, 0]);
        assert_eq!(targets.positions[1].kind, SegmentKind::ShortTerm);
        assert_eq!(
            targets.positions[1].targets,
            vec![vec![2, 4], vec![1, 2], vec![1, 2]]
        );
    }

    #[test]
    fn every_target_bit_comes_from_the_word() {
        let p = params(10);
        let cfg = config();
        let seq = assemble_input_sequence(&user(), &p, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let plan = sample_mask_plan(&seq, &mut rng).unwrap();
            let (_, targets) = apply_mask_and_targets(&seq, &plan, &p, &cfg).unwrap();
            for pos in &targets.positions {
                let w = match &seq.sources[pos.row] {
                    TokenSource::Behavioral { kind, word } => &seq.words(*kind)[*word],
                    other => panic!("masked {other:?}"),
                };
                for (k, ids) in pos.targets.iter().enumerate() {
                    assert!(!ids.is_empty());
                    for id in ids {
                        assert!(w.actions.iter().any(|a| a[k] == *id));
                    }
                    for a in &w.actions {
                        assert!(ids.contains(&a[k]));
                    }
                }
            }
        }
    }

    #[test]
    fn keep_position_variant_leaves_position_and_segment() {
        let p = params(11);
        let cfg = ModelConfig {
            mask_keep_position: true,
            ..config()
        };
        let seq = assemble_input_sequence(&user(), &p, &cfg).unwrap();
        let plan = MaskPlan {
            selected: vec![(3, MaskAction::Zeroed)],
        };
        let (masked, _) = apply_mask_and_targets(&seq, &plan, &p, &cfg).unwrap();
        let expected: Vec<f64> = p.position_embeddings[0]
            .row(5)
            .iter()
            .zip(p.segment_embeddings.row(0))
            .map(|(a, b)| a + b)
            .collect();
        assert_eq!(masked.embeddings.row(3), expected.as_slice());
        assert_eq!(masked.row_states[3], RowState::TokenZeroed);
    }

    #[test]
    fn invalid_plans_are_rejected() {
        let p = params(12);
        let cfg = config();
        let seq = assemble_input_sequence(&user(), &p, &cfg).unwrap();
        for rows in [vec![0], vec![6], vec![3, 2]] {
            let plan = MaskPlan {
                selected: rows.into_iter().map(|r| (r, MaskAction::Zeroed)).collect(),
            };
            assert!(apply_mask_and_targets(&seq, &plan, &p, &cfg).is_err());
        }
    }

    #[test]
    fn plan_log_line() {
        let plan = MaskPlan {
            selected: vec![(1, MaskAction::Zeroed), (4, MaskAction::Kept)],
        };
        assert_eq!(plan.to_log_line("u7"), "u7\t1z,4k");
    }
}
