//! Matched-study data model, CSV ingestion, and per-outcome score construction.
//!
//! Units are stored stratum-major in ingestion order. That ordering is the
//! canonical index for assignment probabilities, scores and assignments
//! throughout the crate.

use std::collections::HashMap;
use std::fs::File;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Unit<T> {
    pub treated: bool,
    pub outcomes: Vec<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stratum<T> {
    /// Original stratum label from the input file.
    pub id: String,
    pub units: Vec<Unit<T>>,
}

impl<T> Stratum<T> {
    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    /// Position of the treated unit within the stratum.
    pub fn treated_index(&self) -> usize {
        self.units.iter().position(|u| u.treated).expect("validated stratum")
    }
}

/// Stratum sizes and offsets into the stratum-major unit ordering.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrataLayout {
    sizes: Vec<usize>,
    offsets: Vec<usize>,
}

impl StrataLayout {
    pub fn new(sizes: Vec<usize>) -> Self {
        let mut offsets = Vec::with_capacity(sizes.len() + 1);
        let mut acc = 0;
        offsets.push(0);
        for &s in &sizes {
            acc += s;
            offsets.push(acc);
        }
        Self { sizes, offsets }
    }

    pub fn pairs(count: usize) -> Self {
        Self::new(vec![2; count])
    }

    #[inline]
    pub fn num_strata(&self) -> usize {
        self.sizes.len()
    }

    #[inline]
    pub fn num_units(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }

    #[inline]
    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    #[inline]
    pub fn size(&self, i: usize) -> usize {
        self.sizes[i]
    }

    /// Unit index range of stratum `i`.
    #[inline]
    pub fn range(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    pub fn all_pairs(&self) -> bool {
        self.sizes.iter().all(|&s| s == 2)
    }

    /// Restricts to a subset of strata (in the given order).
    pub fn select(&self, strata: &[usize]) -> Self {
        Self::new(strata.iter().map(|&i| self.sizes[i]).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedStudy<T> {
    outcome_names: Vec<String>,
    strata: Vec<Stratum<T>>,
}

impl<T: Scalar> MatchedStudy<T> {
    /// Validates the finely stratified design: every stratum has at least two
    /// units, exactly one of them treated, and K finite outcomes per unit.
    pub fn new(outcome_names: Vec<String>, strata: Vec<Stratum<T>>) -> Result<Self> {
        if strata.is_empty() {
            return Err(Error::EmptyInput);
        }
        let k = outcome_names.len();
        if k == 0 {
            return Err(Error::Header("at least one outcome column is required".into()));
        }
        for (i, s) in strata.iter().enumerate() {
            let index = i + 1;
            if s.units.len() < 2 {
                return Err(Error::StratumTooSmall { index, id: s.id.clone(), units: s.units.len() });
            }
            let treated = s.units.iter().filter(|u| u.treated).count();
            if treated == 0 {
                return Err(Error::NoTreated { index, id: s.id.clone() });
            }
            if treated > 1 {
                return Err(Error::MultipleTreated { index, id: s.id.clone(), treated });
            }
            for u in &s.units {
                if u.outcomes.len() != k {
                    return Err(Error::Dimension(format!(
                        "stratum {index}: unit has {} outcomes, expected {k}",
                        u.outcomes.len()
                    )));
                }
                if u.outcomes.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Invalid(format!("stratum {index}: non-finite outcome")));
                }
            }
        }
        Ok(Self { outcome_names, strata })
    }

    /// Builds a pair study from treated-minus-control differences, with the
    /// treated unit first and the control outcome fixed at zero.
    pub fn from_pair_differences(differences: &[Vec<T>]) -> Result<Self> {
        let k = differences.first().map_or(0, |d| d.len());
        let names = (1..=k).map(|j| format!("y{j}")).collect();
        let strata = differences
            .iter()
            .enumerate()
            .map(|(i, d)| Stratum {
                id: (i + 1).to_string(),
                units: vec![
                    Unit { treated: true, outcomes: d.clone() },
                    Unit { treated: false, outcomes: vec![T::zero(); d.len()] },
                ],
            })
            .collect();
        Self::new(names, strata)
    }

    pub fn strata(&self) -> &[Stratum<T>] {
        &self.strata
    }

    pub fn outcome_names(&self) -> &[String] {
        &self.outcome_names
    }

    pub fn num_strata(&self) -> usize {
        self.strata.len()
    }

    pub fn num_outcomes(&self) -> usize {
        self.outcome_names.len()
    }

    pub fn num_units(&self) -> usize {
        self.strata.iter().map(|s| s.len()).sum()
    }

    pub fn layout(&self) -> StrataLayout {
        StrataLayout::new(self.strata.iter().map(|s| s.len()).collect())
    }

    /// Stratum-major unit iterator.
    pub fn units(&self) -> impl Iterator<Item = &Unit<T>> {
        self.strata.iter().flat_map(|s| s.units.iter())
    }

    /// Absolute index of each stratum's treated unit.
    pub fn treated_positions(&self) -> Vec<usize> {
        let layout = self.layout();
        self.strata
            .iter()
            .enumerate()
            .map(|(i, s)| layout.range(i).start + s.treated_index())
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self>
    where
        T: for<'de> Deserialize<'de>,
    {
        let raw: MatchedStudy<T> = serde_json::from_str(text)?;
        Self::new(raw.outcome_names, raw.strata)
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io { path: path.display().to_string(), source }
}

/// Reads a study from CSV (`stratum_id,treated,y1..yK`, header required).
///
/// Strata are renumbered `1..=I` in order of first appearance; units keep
/// their row order within a stratum.
pub fn load_study<T: Scalar>(path: impl AsRef<Path>) -> Result<MatchedStudy<T>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    read_study(file)
}

/// Reads a study from a JSON dump produced by [`MatchedStudy::to_json`].
pub fn load_study_json<T>(path: impl AsRef<Path>) -> Result<MatchedStudy<T>>
where
    T: Scalar + for<'de> Deserialize<'de>,
{
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    MatchedStudy::from_json(&text)
}

pub fn read_study<T: Scalar, R: Read>(reader: R) -> Result<MatchedStudy<T>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.is_empty() || (header.len() == 1 && header[0].is_empty()) {
        return Err(Error::EmptyInput);
    }
    if header.len() < 3 {
        return Err(Error::Header(format!(
            "expected stratum_id,treated,y1..yK; got {} column(s)",
            header.len()
        )));
    }
    if !header[0].eq_ignore_ascii_case("stratum_id") || !header[1].eq_ignore_ascii_case("treated") {
        return Err(Error::Header(format!(
            "first two columns must be stratum_id,treated; got {},{}",
            &header[0], &header[1]
        )));
    }
    let outcome_names: Vec<String> = header.iter().skip(2).map(str::to_owned).collect();
    let k = outcome_names.len();

    let mut order: Vec<String> = Vec::new();
    let mut lookup: HashMap<String, usize> = HashMap::new();
    let mut strata: Vec<Stratum<T>> = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = line + 2;
        if rec.len() != k + 2 {
            return Err(Error::Parse { row, msg: format!("expected {} fields, found {}", k + 2, rec.len()) });
        }
        let id = rec[0].to_owned();
        let treated = match &rec[1] {
            "1" => true,
            "0" => false,
            other => return Err(Error::Parse { row, msg: format!("treated must be 0 or 1, got {other:?}") }),
        };
        let mut outcomes = Vec::with_capacity(k);
        for (j, field) in rec.iter().skip(2).enumerate() {
            let v: f64 = field.parse().map_err(|_| Error::Parse {
                row,
                msg: format!("outcome {} is not numeric: {field:?}", outcome_names[j]),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse { row, msg: format!("outcome {} is not finite", outcome_names[j]) });
            }
            outcomes.push(T::lit(v));
        }
        let slot = *lookup.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            strata.push(Stratum { id: id.clone(), units: Vec::new() });
            strata.len() - 1
        });
        strata[slot].units.push(Unit { treated, outcomes });
    }
    MatchedStudy::new(outcome_names, strata)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "kebab-case")]
pub enum ScoreScheme {
    PairHuber { kappa: f64 },
    AlignedRank,
    UserSupplied,
}

/// Per-unit, per-outcome scores `q_ijk`; `T_k = Z' q_k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix<T> {
    layout: StrataLayout,
    treated: Vec<usize>,
    k: usize,
    q: Vec<T>,
    scheme: ScoreScheme,
}

impl<T: Scalar> ScoreMatrix<T> {
    /// Wraps raw scores; `rows` are stratum-major units.
    pub fn from_parts(
        layout: StrataLayout,
        treated: Vec<usize>,
        rows: &[Vec<T>],
        scheme: ScoreScheme,
    ) -> Result<Self> {
        let n = layout.num_units();
        if rows.len() != n {
            return Err(Error::Dimension(format!("expected {n} score rows, got {}", rows.len())));
        }
        if treated.len() != layout.num_strata() {
            return Err(Error::Dimension("one treated position per stratum required".into()));
        }
        for (i, &t) in treated.iter().enumerate() {
            if !layout.range(i).contains(&t) {
                return Err(Error::Dimension(format!("treated unit {t} outside stratum {}", i + 1)));
            }
        }
        let k = rows.first().map_or(0, |r| r.len());
        if k == 0 {
            return Err(Error::Dimension("scores need at least one outcome column".into()));
        }
        let mut q = Vec::with_capacity(n * k);
        for (unit, r) in rows.iter().enumerate() {
            if r.len() != k {
                return Err(Error::Dimension(format!("row {unit} has {} columns, expected {k}", r.len())));
            }
            for (outcome, &v) in r.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::NonFinite { unit, outcome });
                }
                q.push(v);
            }
        }
        Ok(Self { layout, treated, k, q, scheme })
    }

    #[inline]
    pub fn layout(&self) -> &StrataLayout {
        &self.layout
    }

    #[inline]
    pub fn num_outcomes(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn num_units(&self) -> usize {
        self.layout.num_units()
    }

    pub fn scheme(&self) -> ScoreScheme {
        self.scheme
    }

    #[inline]
    pub fn get(&self, unit: usize, outcome: usize) -> T {
        self.q[unit * self.k + outcome]
    }

    #[inline]
    pub fn row(&self, unit: usize) -> &[T] {
        &self.q[unit * self.k..(unit + 1) * self.k]
    }

    pub fn column(&self, outcome: usize) -> Vec<T> {
        (0..self.num_units()).map(|u| self.get(u, outcome)).collect()
    }

    pub fn treated_positions(&self) -> &[usize] {
        &self.treated
    }

    /// Observed statistic vector `t = Z' q` for the realized assignment.
    pub fn observed(&self) -> Vec<T> {
        self.statistic_at(&self.treated)
    }

    /// `T(z)` for an assignment given by the absolute index of the treated
    /// unit in each stratum.
    pub fn statistic_at(&self, treated: &[usize]) -> Vec<T> {
        let mut t = vec![T::zero(); self.k];
        for &u in treated {
            for (acc, &v) in t.iter_mut().zip(self.row(u)) {
                *acc = *acc + v;
            }
        }
        t
    }

    /// Keeps only the listed outcome columns, in order.
    pub fn select_outcomes(&self, outcomes: &[usize]) -> Result<Self> {
        if outcomes.is_empty() || outcomes.iter().any(|&o| o >= self.k) {
            return Err(Error::Dimension(format!("invalid outcome subset {outcomes:?}")));
        }
        let mut q = Vec::with_capacity(self.num_units() * outcomes.len());
        for u in 0..self.num_units() {
            for &o in outcomes {
                q.push(self.get(u, o));
            }
        }
        Ok(Self {
            layout: self.layout.clone(),
            treated: self.treated.clone(),
            k: outcomes.len(),
            q,
            scheme: self.scheme,
        })
    }

    /// Outcomes whose score column is identically zero.
    pub fn degenerate_outcomes(&self) -> Vec<usize> {
        (0..self.k)
            .filter(|&o| (0..self.num_units()).all(|u| self.get(u, o) == T::zero()))
            .collect()
    }

    pub fn ensure_nondegenerate(&self) -> Result<()> {
        match self.degenerate_outcomes().first() {
            Some(&outcome) => Err(Error::DegenerateOutcome { outcome }),
            None => Ok(()),
        }
    }

    /// Root-mean-square of each score column.
    pub fn column_rms(&self) -> Vec<T> {
        let n = T::from_usize(self.num_units()).unwrap();
        (0..self.k)
            .map(|o| ((0..self.num_units()).map(|u| self.get(u, o).powi(2)).sum::<T>() / n).sqrt())
            .collect()
    }
}

/// Midpoint median; `values` must be non-empty.
pub(crate) fn median<T: Scalar>(values: &mut [T]) -> T {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / T::lit(2.0)
    }
}

/// Huber-psi pair scores: with `d_ik` the first-minus-second unit difference,
/// `q_i1k = sign(d_ik) min(|d_ik| / s_k, kappa)` and `q_i2k = -q_i1k`, where
/// `s_k` is the median of `|d_ik|` over pairs.
pub fn huber_pair_scores<T: Scalar>(study: &MatchedStudy<T>, kappa: T) -> Result<ScoreMatrix<T>> {
    if !(kappa > T::zero()) {
        return Err(Error::Invalid(format!("kappa must be positive, got {kappa}")));
    }
    for (i, s) in study.strata().iter().enumerate() {
        if s.len() != 2 {
            return Err(Error::NotPairs { index: i + 1, units: s.len() });
        }
    }
    let k = study.num_outcomes();
    let diffs: Vec<Vec<T>> = study
        .strata()
        .iter()
        .map(|s| (0..k).map(|o| s.units[0].outcomes[o] - s.units[1].outcomes[o]).collect())
        .collect();
    let mut scale = Vec::with_capacity(k);
    for o in 0..k {
        let mut abs: Vec<T> = diffs.iter().map(|d| d[o].abs()).collect();
        let s = median(&mut abs);
        if !(s > T::zero()) {
            return Err(Error::ZeroScale { outcome: o });
        }
        scale.push(s);
    }
    let mut rows = Vec::with_capacity(2 * diffs.len());
    for d in &diffs {
        let first: Vec<T> = d
            .iter()
            .zip(&scale)
            .map(|(&v, &s)| {
                let sign = if v > T::zero() {
                    T::one()
                } else if v < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                };
                sign * (v.abs() / s).min(kappa)
            })
            .collect();
        let second = first.iter().map(|&v| -v).collect();
        rows.push(first);
        rows.push(second);
    }
    ScoreMatrix::from_parts(
        study.layout(),
        study.treated_positions(),
        &rows,
        ScoreScheme::PairHuber { kappa: kappa.as_f64() },
    )
}

/// Average ranks (1-based) of `values`.
pub(crate) fn average_ranks<T: Scalar>(values: &[T]) -> Vec<T> {
    let n = values.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite values"));
    let mut ranks = vec![T::zero(); n];
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && values[idx[end]] == values[idx[start]] {
            end += 1;
        }
        // ranks start+1 ..= end share their mean
        let avg = T::from_usize(start + 1 + end).unwrap() / T::lit(2.0);
        for &i in &idx[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    ranks
}

/// Aligned-rank scores for general strata: subtract the stratum mean, rank
/// the aligned responses over all units, then center ranks within strata.
pub fn aligned_rank_scores<T: Scalar>(study: &MatchedStudy<T>) -> Result<ScoreMatrix<T>> {
    let layout = study.layout();
    let n = layout.num_units();
    let k = study.num_outcomes();
    let units: Vec<&Unit<T>> = study.units().collect();
    let mut rows = vec![vec![T::zero(); k]; n];
    for o in 0..k {
        let mut aligned = vec![T::zero(); n];
        for i in 0..layout.num_strata() {
            let r = layout.range(i);
            let mean = r.clone().map(|u| units[u].outcomes[o]).sum::<T>() / T::from_usize(r.len()).unwrap();
            for u in r {
                aligned[u] = units[u].outcomes[o] - mean;
            }
        }
        let ranks = average_ranks(&aligned);
        for i in 0..layout.num_strata() {
            let r = layout.range(i);
            let mean = r.clone().map(|u| ranks[u]).sum::<T>() / T::from_usize(r.len()).unwrap();
            for u in r {
                let centered = ranks[u] - mean;
                // exact ties within a stratum must cancel to zero
                rows[u][o] = if centered.abs() <= T::epsilon() * T::from_usize(n).unwrap() {
                    T::zero()
                } else {
                    centered
                };
            }
        }
    }
    ScoreMatrix::from_parts(layout, study.treated_positions(), &rows, ScoreScheme::AlignedRank)
}

/// Wraps caller-provided scores (N rows of K values, stratum-major).
pub fn user_scores<T: Scalar>(study: &MatchedStudy<T>, q: &[Vec<T>]) -> Result<ScoreMatrix<T>> {
    if q.len() != study.num_units() {
        return Err(Error::Dimension(format!("expected {} score rows, got {}", study.num_units(), q.len())));
    }
    let m = ScoreMatrix::from_parts(study.layout(), study.treated_positions(), q, ScoreScheme::UserSupplied)?;
    m.ensure_nondegenerate()?;
    Ok(m)
}

/// Reads an N x K score table (header row required) for [`user_scores`].
pub fn load_score_rows<T: Scalar>(path: impl AsRef<Path>) -> Result<Vec<Vec<T>>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(file);
    let mut rows = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .map(T::lit)
                    .map_err(|_| Error::Parse { row: line + 2, msg: format!("score is not numeric: {f:?}") })
            })
            .collect::<Result<Vec<T>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn csv_study(text: &str) -> Result<MatchedStudy<f64>> {
        read_study(text.as_bytes())
    }

    #[test]
    fn counts_two_pairs() {
        let s = csv_study("stratum_id,treated,y1,y2\na,1,1,2\na,0,0,1\nb,0,3,3\nb,1,5,1\n").unwrap();
        assert_eq!((s.num_strata(), s.num_units(), s.num_outcomes()), (2, 4, 2));
        assert_eq!(s.treated_positions(), vec![0, 3]);
    }

    #[test]
    fn orphan_row_is_rejected() {
        let err = csv_study("stratum_id,treated,y1\na,1,1\na,0,0\nb,1,3\n").unwrap_err();
        assert!(err.to_string().contains("stratum 2 has 1 unit"), "{err}");
    }

    #[test]
    fn stratum_without_treated_is_rejected() {
        let err = csv_study("stratum_id,treated,y1\na,0,1\na,0,0\n").unwrap_err();
        assert!(err.to_string().contains("no treated unit"), "{err}");
    }

    #[test]
    fn two_treated_is_rejected() {
        let err = csv_study("stratum_id,treated,y1\na,1,1\na,1,0\n").unwrap_err();
        assert!(matches!(err, Error::MultipleTreated { .. }));
    }

    #[test]
    fn non_numeric_outcome_is_rejected() {
        let err = csv_study("stratum_id,treated,y1\na,1,x\na,0,0\n").unwrap_err();
        assert!(matches!(err, Error::Parse { row: 2, .. }), "{err}");
    }

    #[test]
    fn empty_file_is_rejected() {
        assert!(csv_study("").is_err());
        assert!(matches!(csv_study("stratum_id,treated,y1\n").unwrap_err(), Error::EmptyInput));
    }

    #[test]
    fn strata_renumbered_in_first_appearance_order() {
        let s = csv_study("stratum_id,treated,y1\nz,1,1\nq,1,2\nz,0,0\nq,0,0\n").unwrap();
        assert_eq!(s.strata()[0].id, "z");
        assert_eq!(s.strata()[1].id, "q");
        assert_eq!(s.strata()[0].units[1].outcomes[0], 0.0);
    }

    #[test]
    fn huber_scores_untrimmed() {
        let s = MatchedStudy::from_pair_differences(&[vec![2.0], vec![-1.0], vec![0.5]]).unwrap();
        let q = huber_pair_scores(&s, 2.5).unwrap();
        assert_eq!(q.column(0), vec![2.0, -2.0, -1.0, 1.0, 0.5, -0.5]);
    }

    #[test]
    fn huber_scores_trimmed_at_kappa() {
        let s = MatchedStudy::from_pair_differences(&[vec![10.0], vec![1.0], vec![1.0]]).unwrap();
        let q = huber_pair_scores(&s, 2.5).unwrap();
        assert_relative_eq!(q.get(0, 0), 2.5);
        assert_relative_eq!(q.get(2, 0), 1.0);
        assert_relative_eq!(q.observed()[0], 4.5);
    }

    #[test]
    fn huber_zero_scale_is_error() {
        let s = MatchedStudy::from_pair_differences(&[vec![1.0, 0.0], vec![2.0, 0.0]]).unwrap();
        assert!(matches!(huber_pair_scores(&s, 2.5).unwrap_err(), Error::ZeroScale { outcome: 1 }));
    }

    #[test]
    fn huber_rejects_non_pairs() {
        let s = csv_study("stratum_id,treated,y1\na,1,1\na,0,0\na,0,2\n").unwrap();
        assert!(matches!(huber_pair_scores(&s, 2.5).unwrap_err(), Error::NotPairs { .. }));
    }

    #[test]
    fn even_median_is_midpoint() {
        let mut v = vec![4.0, 1.0, 3.0, 2.0];
        assert_eq!(median(&mut v), 2.5);
    }

    #[test]
    fn aligned_ranks_single_pair() {
        let s = MatchedStudy::from_pair_differences(&[vec![4.0]]).unwrap();
        let q = aligned_rank_scores(&s).unwrap();
        assert!(q.get(0, 0) > 0.0);
        assert_eq!(q.get(0, 0), -q.get(1, 0));
    }

    #[test]
    fn aligned_ranks_center_within_strata() {
        let s = csv_study("stratum_id,treated,y1\na,1,3\na,0,1\na,0,7\nb,1,2\nb,0,2.5\n").unwrap();
        let q = aligned_rank_scores(&s).unwrap();
        let l = q.layout().clone();
        for i in 0..l.num_strata() {
            let sum: f64 = l.range(i).map(|u| q.get(u, 0)).sum();
            assert_relative_eq!(sum, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn aligned_ranks_identical_strata_identical_blocks() {
        let s = csv_study("stratum_id,treated,y1\na,1,3\na,0,1\nb,1,3\nb,0,1\n").unwrap();
        let q = aligned_rank_scores(&s).unwrap();
        assert_eq!(q.row(0), q.row(2));
        assert_eq!(q.row(1), q.row(3));
    }

    #[test]
    fn aligned_ranks_constant_column_is_zero_and_flagged() {
        let s = csv_study("stratum_id,treated,y1,y2\na,1,3,1\na,0,3,0\nb,1,3,2\nb,0,3,5\n").unwrap();
        let q = aligned_rank_scores(&s).unwrap();
        assert!(q.column(0).iter().all(|&v| v == 0.0));
        assert_eq!(q.degenerate_outcomes(), vec![0]);
        assert!(q.ensure_nondegenerate().is_err());
    }

    #[test]
    fn user_scores_pass_through() {
        let s = MatchedStudy::from_pair_differences(&[vec![2.0], vec![-1.0], vec![0.5]]).unwrap();
        let h = huber_pair_scores(&s, 2.5).unwrap();
        let rows: Vec<Vec<f64>> = (0..6).map(|u| h.row(u).to_vec()).collect();
        let u = user_scores(&s, &rows).unwrap();
        assert_eq!(u.observed(), h.observed());
    }

    #[test]
    fn user_scores_reject_zero_column_and_nan() {
        let s = MatchedStudy::from_pair_differences(&[vec![2.0, 1.0], vec![-1.0, 1.0]]).unwrap();
        let zero = vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![1.0, 0.0], vec![-1.0, 0.0]];
        let err = user_scores(&s, &zero).unwrap_err();
        assert!(err.to_string().contains("degenerate outcome"), "{err}");
        let nan = vec![vec![1.0, f64::NAN], vec![-1.0, 1.0], vec![1.0, 1.0], vec![-1.0, 1.0]];
        assert!(matches!(user_scores(&s, &nan).unwrap_err(), Error::NonFinite { .. }));
        assert!(matches!(user_scores(&s, &zero[..3]).unwrap_err(), Error::Dimension(_)));
    }

    #[test]
    fn json_round_trip() {
        let s = csv_study("stratum_id,treated,y1,y2\na,1,1,2\na,0,0,1\nb,0,3,3\nb,1,5,1\nb,0,2,2\n").unwrap();
        let back: MatchedStudy<f64> = MatchedStudy::from_json(&s.to_json().unwrap()).unwrap();
        assert_eq!(back, s);
    }
}
