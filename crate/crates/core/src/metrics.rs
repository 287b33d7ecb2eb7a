//! Set-level evaluation of generated clouds against a reference set: MMD,
//! COV, 1-NNA and TMD.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{chamfer_points, emd_points, EmdMode};
use crate::pcio::{normalize_unit_sphere, PointCloud};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distance {
    Cd,
    Emd,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricOptions {
    /// Compare clouds as given instead of normalizing each to the unit sphere.
    pub raw: bool,
    pub emd_mode: EmdMode,
}

impl Default for MetricOptions {
    fn default() -> Self {
        Self {
            raw: false,
            emd_mode: EmdMode::Auto,
        }
    }
}

fn prepare(set: &[PointCloud], opts: &MetricOptions) -> Result<Vec<Vec<[f64; 3]>>> {
    set.iter()
        .map(|pc| {
            if opts.raw {
                Ok(pc.to_f64())
            } else {
                normalize_unit_sphere(pc).map(|p| p.to_f64())
            }
        })
        .collect()
}

fn distance(a: &[[f64; 3]], b: &[[f64; 3]], dist: Distance, mode: EmdMode) -> Result<f64> {
    match dist {
        Distance::Cd => chamfer_points(a, b),
        Distance::Emd => emd_points(a, b, mode).map(|o| o.value),
    }
}

/// `table[i][j]` is the distance from `a[i]` to `b[j]`.
pub fn pairwise(a: &[PointCloud], b: &[PointCloud], dist: Distance, opts: &MetricOptions) -> Result<Vec<Vec<f64>>> {
    let (pa, pb) = (prepare(a, opts)?, prepare(b, opts)?);
    pa.iter()
        .map(|x| pb.iter().map(|y| distance(x, y, dist, opts.emd_mode)).collect())
        .collect()
}

/// Index of the smallest entry; ties go to the lower index.
fn argmin(row: impl Iterator<Item = (usize, f64)>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, d) in row {
        if best.is_none_or(|(_, b)| d < b) {
            best = Some((i, d));
        }
    }
    best.map(|b| b.0)
}

fn check_nonempty(gen: usize, reference: usize) -> Result<()> {
    if gen == 0 || reference == 0 {
        return Err(Error::domain("metrics need nonempty generated and reference sets"));
    }
    Ok(())
}

/// MMD from a generated-by-reference distance table.
pub fn mmd_from_table(table: &[Vec<f64>]) -> Result<f64> {
    let n_ref = table.first().map_or(0, Vec::len);
    check_nonempty(table.len(), n_ref)?;
    let sum: f64 = (0..n_ref)
        .map(|r| table.iter().map(|row| row[r]).fold(f64::INFINITY, f64::min))
        .sum();
    Ok(sum / n_ref as f64)
}

/// COV from a generated-by-reference distance table.
pub fn cov_from_table(table: &[Vec<f64>]) -> Result<f64> {
    let n_ref = table.first().map_or(0, Vec::len);
    check_nonempty(table.len(), n_ref)?;
    let mut matched = vec![false; n_ref];
    for row in table {
        if let Some(r) = argmin(row.iter().copied().enumerate()) {
            matched[r] = true;
        }
    }
    Ok(matched.iter().filter(|&&m| m).count() as f64 / n_ref as f64)
}

/// Leave-one-out 1-NN accuracy from the distance table over the union
/// (generated first, then reference).
pub fn one_nna_from_table(union: &[Vec<f64>], n_gen: usize) -> Result<f64> {
    let n = union.len();
    if n_gen < 2 || n - n_gen < 2 {
        return Err(Error::domain("1-NNA needs at least two samples in each set"));
    }
    let correct = (0..n)
        .filter(|&i| {
            let j = argmin((0..n).filter(|&j| j != i).map(|j| (j, union[i][j]))).unwrap();
            (i < n_gen) == (j < n_gen)
        })
        .count();
    Ok(correct as f64 / n as f64)
}

pub fn mmd(gen: &[PointCloud], reference: &[PointCloud], dist: Distance) -> Result<f64> {
    check_nonempty(gen.len(), reference.len())?;
    mmd_from_table(&pairwise(gen, reference, dist, &MetricOptions::default())?)
}

pub fn cov(gen: &[PointCloud], reference: &[PointCloud], dist: Distance) -> Result<f64> {
    check_nonempty(gen.len(), reference.len())?;
    cov_from_table(&pairwise(gen, reference, dist, &MetricOptions::default())?)
}

pub fn one_nna(gen: &[PointCloud], reference: &[PointCloud], dist: Distance) -> Result<f64> {
    one_nna_with(gen, reference, dist, &MetricOptions::default())
}

pub fn one_nna_with(gen: &[PointCloud], reference: &[PointCloud], dist: Distance, opts: &MetricOptions) -> Result<f64> {
    if gen.len() < 2 || reference.len() < 2 {
        return Err(Error::domain("1-NNA needs at least two samples in each set"));
    }
    let union: Vec<PointCloud> = gen.iter().chain(reference).cloned().collect();
    one_nna_from_table(&pairwise(&union, &union, dist, opts)?, gen.len())
}

/// Total mutual difference: for each shape, its mean Chamfer distance to the
/// others, summed.
pub fn tmd(shapes: &[PointCloud]) -> Result<f64> {
    tmd_with(shapes, &MetricOptions::default())
}

pub fn tmd_with(shapes: &[PointCloud], opts: &MetricOptions) -> Result<f64> {
    let k = shapes.len();
    if k < 2 {
        return Err(Error::domain("TMD needs at least two shapes"));
    }
    let table = pairwise(shapes, shapes, Distance::Cd, opts)?;
    Ok((0..k)
        .map(|i| (0..k).filter(|&j| j != i).map(|j| table[i][j]).sum::<f64>() / (k - 1) as f64)
        .sum())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mmd_cd: f64,
    pub mmd_emd: f64,
    pub cov_cd: f64,
    pub cov_emd: f64,
    pub nna_cd: f64,
    pub nna_emd: f64,
    pub tmd: Option<f64>,
    pub n_gen: usize,
    pub n_ref: usize,
    /// EMD solver the pairwise tables were computed with.
    pub emd_mode: EmdMode,
    pub normalized: bool,
}

/// All generation metrics, with each distance table computed once.
pub fn evaluate(gen: &[PointCloud], reference: &[PointCloud], opts: &MetricOptions) -> Result<MetricReport> {
    if gen.len() < 2 || reference.len() < 2 {
        return Err(Error::domain("evaluation needs at least two generated and two reference clouds"));
    }
    let n_gen = gen.len();
    let union: Vec<PointCloud> = gen.iter().chain(reference).cloned().collect();
    let mut out = [(0.0, 0.0, 0.0); 2];
    for (slot, dist) in [Distance::Cd, Distance::Emd].into_iter().enumerate() {
        let table = pairwise(&union, &union, dist, opts)?;
        let cross: Vec<Vec<f64>> = table[..n_gen].iter().map(|row| row[n_gen..].to_vec()).collect();
        out[slot] = (mmd_from_table(&cross)?, cov_from_table(&cross)?, one_nna_from_table(&table, n_gen)?);
    }
    let points = union.iter().map(PointCloud::len).max().unwrap_or(0);
    Ok(MetricReport {
        mmd_cd: out[0].0,
        mmd_emd: out[1].0,
        cov_cd: out[0].1,
        cov_emd: out[1].1,
        nna_cd: out[0].2,
        nna_emd: out[1].2,
        tmd: None,
        n_gen,
        n_ref: reference.len(),
        emd_mode: opts.emd_mode.resolve(points),
        normalized: !opts.raw,
    })
}

fn mode_name(m: EmdMode) -> &'static str {
    match m {
        EmdMode::Exact => "exact",
        EmdMode::Approximate => "approximate",
        EmdMode::Auto => "auto",
    }
}

impl MetricReport {
    /// Flat `key = value` text, one entry per line.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for (k, v) in [
            ("mmd_cd", self.mmd_cd),
            ("mmd_emd", self.mmd_emd),
            ("cov_cd", self.cov_cd),
            ("cov_emd", self.cov_emd),
            ("nna_cd", self.nna_cd),
            ("nna_emd", self.nna_emd),
        ] {
            writeln!(s, "{k} = {v:e}").unwrap();
        }
        if let Some(t) = self.tmd {
            writeln!(s, "tmd = {t:e}").unwrap();
        }
        writeln!(s, "n_gen = {}", self.n_gen).unwrap();
        writeln!(s, "n_ref = {}", self.n_ref).unwrap();
        writeln!(s, "emd_mode = {}", mode_name(self.emd_mode)).unwrap();
        writeln!(s, "normalized = {}", self.normalized).unwrap();
        s
    }

    pub fn from_kv(text: &str, source_name: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(source_name, format!("line {}", n + 1), "expected key = value"))?;
            map.insert(k.trim().to_string(), (n + 1, v.trim().to_string()));
        }
        let take = |key: &str| -> Result<(usize, String)> {
            map.get(key)
                .cloned()
                .ok_or_else(|| Error::parse(source_name, "end of file", format!("missing key {key}")))
        };
        let num = |key: &str| -> Result<f64> {
            let (line, v) = take(key)?;
            v.parse().map_err(|_| Error::parse(source_name, format!("line {line}"), format!("bad number for {key}")))
        };
        let count = |key: &str| -> Result<usize> {
            let (line, v) = take(key)?;
            v.parse().map_err(|_| Error::parse(source_name, format!("line {line}"), format!("bad count for {key}")))
        };
        let (line, mode) = take("emd_mode")?;
        let emd_mode = match mode.as_str() {
            "exact" => EmdMode::Exact,
            "approximate" => EmdMode::Approximate,
            "auto" => EmdMode::Auto,
            _ => return Err(Error::parse(source_name, format!("line {line}"), "unknown emd_mode")),
        };
        let (line, norm) = take("normalized")?;
        let normalized = norm
            .parse()
            .map_err(|_| Error::parse(source_name, format!("line {line}"), "normalized must be true or false"))?;
        Ok(Self {
            mmd_cd: num("mmd_cd")?,
            mmd_emd: num("mmd_emd")?,
            cov_cd: num("cov_cd")?,
            cov_emd: num("cov_emd")?,
            nna_cd: num("nna_cd")?,
            nna_emd: num("nna_emd")?,
            tmd: if map.contains_key("tmd") { Some(num("tmd")?) } else { None },
            n_gen: count("n_gen")?,
            n_ref: count("n_ref")?,
            emd_mode,
            normalized,
        })
    }

    /// Fixed-order table; MMD-CD and TMD are scaled by 1e3, MMD-EMD by 1e2,
    /// COV and 1-NNA are percentages.
    pub fn table(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{:<14}{:>10}{:>10}", "metric", "CD", "EMD").unwrap();
        writeln!(s, "{:<14}{:>10.3}{:>10.3}", "MMD", self.mmd_cd * 1e3, self.mmd_emd * 1e2).unwrap();
        writeln!(s, "{:<14}{:>9.2}%{:>9.2}%", "COV", self.cov_cd * 100.0, self.cov_emd * 100.0).unwrap();
        writeln!(s, "{:<14}{:>9.2}%{:>9.2}%", "1-NNA", self.nna_cd * 100.0, self.nna_emd * 100.0).unwrap();
        if let Some(t) = self.tmd {
            writeln!(s, "{:<14}{:>10.3}", "TMD", t * 1e3).unwrap();
        }
        writeln!(
            s,
            "({} generated, {} reference, emd {}, {})",
            self.n_gen,
            self.n_ref,
            mode_name(self.emd_mode),
            if self.normalized { "unit-sphere normalized" } else { "raw" }
        )
        .unwrap();
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob(center: [f64; 3], scale: f64, n: usize, seed: u64) -> PointCloud {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let mut next = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let pts: Vec<[f64; 3]> = (0..n)
            .map(|_| [center[0] + scale * next(), center[1] + scale * next(), center[2] + scale * next()])
            .collect();
        PointCloud::from_f64(&pts).unwrap()
    }

    #[test]
    fn identical_sets() {
        let set: Vec<PointCloud> = (0..4).map(|i| blob([0.0; 3], 1.0, 12, i)).collect();
        assert!(mmd(&set, &set, Distance::Cd).unwrap().abs() < 1e-12);
        assert!(mmd(&set, &set, Distance::Emd).unwrap().abs() < 1e-12);
        assert_eq!(cov(&set, &set, Distance::Cd).unwrap(), 1.0);
        assert_eq!(one_nna(&set, &set, Distance::Cd).unwrap(), 0.0);
        let same = vec![set[0].clone(); 3];
        assert!(tmd(&same).unwrap().abs() < 1e-12);
    }

    #[test]
    fn singleton_and_collapsed() {
        let a = blob([0.0; 3], 1.0, 10, 1);
        let b = blob([0.0; 3], 1.0, 10, 2);
        let d = chamfer_points(
            &normalize_unit_sphere(&b).unwrap().to_f64(),
            &normalize_unit_sphere(&a).unwrap().to_f64(),
        )
        .unwrap();
        assert!((mmd(&[a.clone()], &[b.clone()], Distance::Cd).unwrap() - d).abs() < 1e-12);
        let reference: Vec<PointCloud> = (0..4).map(|i| blob([0.0; 3], 1.0, 10, 10 + i)).collect();
        let gen = vec![reference[2].clone(); 3];
        assert_eq!(cov(&gen, &reference, Distance::Cd).unwrap(), 0.25);
    }

    #[test]
    fn separated_clusters() {
        let gen: Vec<PointCloud> = (0..4).map(|i| blob([0.0; 3], 1.0, 10, i)).collect();
        let reference: Vec<PointCloud> = (0..4).map(|i| blob([5.0, 0.0, 0.0], 0.1, 10, 20 + i)).collect();
        let raw = MetricOptions { raw: true, ..Default::default() };
        assert_eq!(one_nna_with(&gen, &reference, Distance::Cd, &raw).unwrap(), 1.0);
    }

    #[test]
    fn tmd_of_two() {
        let a = blob([0.0; 3], 1.0, 8, 3);
        let b = blob([0.0; 3], 2.0, 8, 4);
        let raw = MetricOptions { raw: true, ..Default::default() };
        let cd = chamfer_points(&a.to_f64(), &b.to_f64()).unwrap();
        assert!((tmd_with(&[a, b], &raw).unwrap() - 2.0 * cd).abs() < 1e-12);
    }

    #[test]
    fn domain_errors() {
        let a = blob([0.0; 3], 1.0, 8, 3);
        assert!(mmd(&[], &[a.clone()], Distance::Cd).is_err());
        assert!(cov(&[a.clone()], &[], Distance::Cd).is_err());
        assert!(one_nna(&[a.clone()], &[a.clone(), a.clone()], Distance::Cd).is_err());
        assert!(tmd(&[a]).is_err());
    }

    #[test]
    fn report_round_trip() {
        let r = MetricReport {
            mmd_cd: 1.25e-3,
            mmd_emd: 0.0512,
            cov_cd: 0.5,
            cov_emd: 0.375,
            nna_cd: 0.6,
            nna_emd: 0.65,
            tmd: Some(0.0123),
            n_gen: 16,
            n_ref: 8,
            emd_mode: EmdMode::Exact,
            normalized: true,
        };
        assert_eq!(MetricReport::from_kv(&r.to_kv(), "report").unwrap(), r);
        assert!(r.table().contains("1.250"));
        assert!(MetricReport::from_kv("mmd_cd = x\n", "bad").is_err());
    }
}
