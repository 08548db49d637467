use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::{ratio, Codec};
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::metrics::psnr;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Measurement {
    pub bits: u64,
    /// PSNR of the decoded image against its source, unit peak.
    pub psnr: f64,
}

/// Measured size and quality of every image at every qp of a window.
#[derive(Clone, Debug, PartialEq)]
pub struct SizeTable {
    paths: Vec<String>,
    pixels: Vec<u64>,
    qps: Vec<i32>,
    /// `cells[image][qp index]`
    cells: Vec<Vec<Measurement>>,
}

impl SizeTable {
    /// Rows are reordered by path so that ties resolve in path order.
    pub fn new(
        paths: Vec<String>,
        pixels: Vec<u64>,
        qps: Vec<i32>,
        cells: Vec<Vec<Measurement>>,
    ) -> Result<Self> {
        let n = paths.len();
        if n == 0 || pixels.len() != n || cells.len() != n {
            return Err(Error::RatePlan(format!(
                "size table needs matching non-empty rows: {n} paths, {} pixel counts, {} rows",
                pixels.len(),
                cells.len()
            )));
        }
        if qps.is_empty() || qps.windows(2).any(|p| p[1] != p[0] + 1) {
            return Err(Error::RatePlan(format!("qp window {qps:?} must be contiguous ascending")));
        }
        if cells.iter().any(|row| row.len() != qps.len()) || pixels.contains(&0) {
            return Err(Error::RatePlan("ragged size table or empty image".into()));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| paths[a].cmp(&paths[b]));
        if order.windows(2).any(|p| paths[p[0]] == paths[p[1]]) {
            return Err(Error::RatePlan("duplicate image path".into()));
        }
        Ok(Self {
            paths: order.iter().map(|&i| paths[i].clone()).collect(),
            pixels: order.iter().map(|&i| pixels[i]).collect(),
            qps,
            cells: order.iter().map(|&i| cells[i].clone()).collect(),
        })
    }

    pub fn paths(&self) -> &[String] {
        &self.paths
    }

    pub fn qps(&self) -> &[i32] {
        &self.qps
    }

    pub fn pixels(&self) -> &[u64] {
        &self.pixels
    }

    pub fn get(&self, image: usize, qp: i32) -> Option<Measurement> {
        let j = usize::try_from(qp - self.qps[0]).ok()?;
        self.cells.get(image)?.get(j).copied()
    }

    fn bits(&self, image: usize, qp_index: usize) -> u64 {
        self.cells[image][qp_index].bits
    }

    fn total_pixels(&self) -> u64 {
        self.pixels.iter().sum()
    }

    fn check_monotone(&self) -> Result<()> {
        for (i, row) in self.cells.iter().enumerate() {
            for j in 1..row.len() {
                if row[j].bits > row[j - 1].bits {
                    return Err(Error::RatePlan(format!(
                        "{}: size grows from {} bits at qp {} to {} bits at qp {}",
                        self.paths[i],
                        row[j - 1].bits,
                        self.qps[j - 1],
                        row[j].bits,
                        self.qps[j]
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Codes every image at every qp of `window` (inclusive) and records bits
/// and PSNR.
pub fn measure_sizes(
    images: &[(String, ImageBuffer)],
    codec: &dyn Codec,
    window: (i32, i32),
) -> Result<SizeTable> {
    let (lo, hi) = codec.qp_range();
    if window.0 > window.1 || window.0 < lo || window.1 > hi {
        return Err(Error::RatePlan(format!(
            "qp window {}..={} not inside {}'s ladder {lo}..={hi}",
            window.0,
            window.1,
            codec.name()
        )));
    }
    let qps: Vec<i32> = (window.0..=window.1).collect();
    let mut cells = Vec::with_capacity(images.len());
    for (_, image) in images {
        let mut row = Vec::with_capacity(qps.len());
        for &qp in &qps {
            let coded = codec.code(image, qp)?;
            row.push(Measurement {
                bits: coded.bits,
                psnr: psnr(&coded.decoded, image, 1.0)?,
            });
        }
        cells.push(row);
    }
    SizeTable::new(
        images.iter().map(|(p, _)| p.clone()).collect(),
        images
            .iter()
            .map(|(_, im)| (im.height() * im.width()) as u64)
            .collect(),
        qps,
        cells,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PlanOptions {
    /// Number of distinct adjacent qps an assignment may use. 2 mixes the
    /// base qp with its neighbour; 3 additionally allows the next step up.
    pub mix_span: usize,
    /// After the greedy pass, search all assignments for one that lands
    /// closer to the target, when there are at most [`EXACT_SEARCH_LIMIT`] of
    /// them.
    pub closest_fit: bool,
}

impl Default for PlanOptions {
    fn default() -> Self {
        Self {
            mix_span: 2,
            closest_fit: true,
        }
    }
}

/// Largest number of candidate assignments (`mix_span^images`) the
/// closest-fit search will enumerate.
pub const EXACT_SEARCH_LIMIT: u64 = 1 << 20;

#[derive(Clone, Debug, PartialEq)]
pub struct PlanEntry {
    pub path: String,
    pub qp: i32,
    pub bits: u64,
    pub pixels: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RatePlan {
    /// One row per image, in path order.
    pub entries: Vec<PlanEntry>,
    pub assignments: BTreeMap<String, i32>,
    pub measured_bits: BTreeMap<(String, i32), u64>,
    pub achieved_bpp: f64,
    pub target_bpp: f64,
}

impl RatePlan {
    pub fn qp_spread(&self) -> i32 {
        let qps = self.entries.iter().map(|e| e.qp);
        qps.clone().max().unwrap_or(0) - qps.min().unwrap_or(0)
    }

    /// `path,qp,bits,bpp` rows followed by a `# summary` line.
    pub fn to_text(&self) -> String {
        let mut out = String::from("path,qp,bits,bpp\n");
        for e in &self.entries {
            let _ = writeln!(out, "{},{},{},{:.6}", e.path, e.qp, e.bits, ratio(e.bits, e.pixels));
        }
        let bits: u64 = self.entries.iter().map(|e| e.bits).sum();
        let pixels: u64 = self.entries.iter().map(|e| e.pixels).sum();
        let _ = writeln!(
            out,
            "# summary images={} total_bits={} total_pixels={} achieved_bpp={:.6} target_bpp={:.6}",
            self.entries.len(),
            bits,
            pixels,
            self.achieved_bpp,
            self.target_bpp
        );
        out
    }
}

/// Assigns a qp per image so the dataset bpp (total bits over total pixels)
/// stays at or below `target_bpp`.
///
/// The base qp is the finest one at which the whole set fits. Images are then
/// moved one step finer, best PSNR gain per added bit first, as long as the
/// budget allows; with `mix_span` 2 only the base qp and its finer neighbour
/// appear. With [`PlanOptions::closest_fit`] a final exhaustive pass
/// replaces the greedy result by any assignment that lands closer to the
/// target.
pub fn rate_target_plan(table: &SizeTable, target_bpp: f64, options: &PlanOptions) -> Result<RatePlan> {
    if !(target_bpp > 0.0) {
        return Err(Error::RatePlan(format!("target bpp {target_bpp} must be positive")));
    }
    if options.mix_span == 0 || options.mix_span > 3 {
        return Err(Error::RatePlan(format!(
            "mix span {} must be 1, 2 or 3",
            options.mix_span
        )));
    }
    table.check_monotone()?;
    let n = table.paths.len();
    let pixels = table.total_pixels();
    let fits = |bits: u64| ratio(bits, pixels) <= target_bpp;
    let column = |j: usize| (0..n).map(|i| table.bits(i, j)).sum::<u64>();

    let last = table.qps.len() - 1;
    let Some(base) = (0..=last).find(|&j| fits(column(j))) else {
        return Err(Error::RatePlan(format!(
            "target {target_bpp} bpp unreachable: the minimum achievable is {:.6} bpp at qp {}",
            ratio(column(last), pixels),
            table.qps[last]
        )));
    };
    let finest = base.saturating_sub(options.mix_span - 1);
    let mut level = vec![base; n];
    let mut total = column(base);

    loop {
        let mut candidates: Vec<(f64, usize)> = (0..n)
            .filter(|&i| level[i] > finest)
            .map(|i| {
                let (from, to) = (table.cells[i][level[i]], table.cells[i][level[i] - 1]);
                let added = to.bits - from.bits;
                let gain = to.psnr - from.psnr;
                let per_bit = if added == 0 {
                    f64::INFINITY
                } else if gain.is_nan() {
                    0.0
                } else {
                    gain / added as f64
                };
                (per_bit, i)
            })
            .collect();
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let pick = candidates.into_iter().find(|&(_, i)| {
            fits(total - table.bits(i, level[i]) + table.bits(i, level[i] - 1))
        });
        let Some((_, i)) = pick else { break };
        total = total - table.bits(i, level[i]) + table.bits(i, level[i] - 1);
        level[i] -= 1;
    }

    let span = (base - finest + 1) as u64;
    if options.closest_fit && span > 1 && span.checked_pow(n as u32).is_some_and(|c| c <= EXACT_SEARCH_LIMIT) {
        let psnr_sum = |lv: &[usize]| (0..n).map(|i| table.cells[i][lv[i]].psnr).sum::<f64>();
        let mut search = ClosestFit {
            table,
            fits: &fits,
            base,
            finest,
            best_bits: total,
            best_psnr: psnr_sum(&level),
            best: None,
        };
        search.run(&mut vec![base; n], 0, column(base));
        if let Some(better) = search.best {
            total = search.best_bits;
            level = better;
        }
    }

    let entries: Vec<PlanEntry> = (0..n)
        .map(|i| PlanEntry {
            path: table.paths[i].clone(),
            qp: table.qps[level[i]],
            bits: table.bits(i, level[i]),
            pixels: table.pixels[i],
        })
        .collect();
    let mut measured_bits = BTreeMap::new();
    for i in 0..n {
        for (j, &qp) in table.qps.iter().enumerate() {
            measured_bits.insert((table.paths[i].clone(), qp), table.bits(i, j));
        }
    }
    Ok(RatePlan {
        assignments: entries.iter().map(|e| (e.path.clone(), e.qp)).collect(),
        measured_bits,
        achieved_bpp: ratio(total, pixels),
        target_bpp,
        entries,
    })
}

/// Depth-first search over per-image levels in `finest..=base` for the
/// largest total that fits, higher PSNR sum breaking ties. Only strict
/// improvements over the incumbent replace it, so the result is
/// deterministic.
struct ClosestFit<'a, F: Fn(u64) -> bool> {
    table: &'a SizeTable,
    fits: &'a F,
    base: usize,
    finest: usize,
    best_bits: u64,
    best_psnr: f64,
    best: Option<Vec<usize>>,
}

impl<F: Fn(u64) -> bool> ClosestFit<'_, F> {
    /// `total` counts images before `i` at their chosen level and the rest at
    /// `base`, the cheapest option, so an overflow prunes the subtree.
    fn run(&mut self, level: &mut Vec<usize>, i: usize, total: u64) {
        if !(self.fits)(total) {
            return;
        }
        if i == level.len() {
            if total < self.best_bits {
                return;
            }
            let psnr: f64 = (0..level.len()).map(|k| self.table.cells[k][level[k]].psnr).sum();
            if total > self.best_bits || psnr > self.best_psnr {
                self.best_bits = total;
                self.best_psnr = psnr;
                self.best = Some(level.clone());
            }
            return;
        }
        for j in (self.finest..=self.base).rev() {
            level[i] = j;
            let t = total - self.table.bits(i, self.base) + self.table.bits(i, j);
            self.run(level, i + 1, t);
        }
        level[i] = self.base;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(rows: &[&[u64]], pixels: u64, qp0: i32) -> SizeTable {
        let n = rows.len();
        let qps = (qp0..qp0 + rows[0].len() as i32).collect();
        let cells = rows
            .iter()
            .map(|r| {
                r.iter()
                    .map(|&b| Measurement {
                        bits: b,
                        psnr: 20.0 + (b as f64).ln(),
                    })
                    .collect()
            })
            .collect();
        SizeTable::new(
            (0..n).map(|i| format!("img{i}")).collect(),
            vec![pixels; n],
            qps,
            cells,
        )
        .unwrap()
    }

    #[test]
    fn two_images_mix_to_exact_target() {
        let t = table(&[&[1600, 1400], &[1600, 1400]], 10_000, 3);
        let plan = rate_target_plan(&t, 0.15, &PlanOptions::default()).unwrap();
        assert_eq!(plan.achieved_bpp, 0.15);
        let mut qps: Vec<i32> = plan.assignments.values().copied().collect();
        qps.sort();
        assert_eq!(qps, vec![3, 4]);
        // the tie goes to the first path
        assert_eq!(plan.assignments["img0"], 3);
    }

    #[test]
    fn closest_fit_beats_greedy_stopping_point() {
        let mut t = table(&[&[110, 100], &[150, 100]], 50, 0);
        // the cheap upgrade has the best gain per bit but blocks the one
        // that fills the budget exactly
        t.cells[0][0].psnr = 40.0;
        t.cells[0][1].psnr = 35.0;
        let target = 2.5;
        let greedy = rate_target_plan(&t, target, &PlanOptions { closest_fit: false, ..PlanOptions::default() }).unwrap();
        assert_eq!(greedy.achieved_bpp, 2.1);
        assert_eq!(greedy.assignments["img0"], 0);
        let exact = rate_target_plan(&t, target, &PlanOptions::default()).unwrap();
        assert_eq!(exact.achieved_bpp, 2.5);
        assert_eq!(exact.assignments["img0"], 1);
        assert_eq!(exact.assignments["img1"], 0);
        assert_eq!(exact.qp_spread(), 1);
    }

    #[test]
    fn unconstrained_uses_finest_qp() {
        let t = table(&[&[100, 80, 60], &[120, 90, 70]], 10_000, 0);
        let plan = rate_target_plan(&t, 0.15, &PlanOptions::default()).unwrap();
        assert!(plan.assignments.values().all(|&q| q == 0));
        assert_eq!(plan.achieved_bpp, 220.0 / 20_000.0);
    }

    #[test]
    fn infeasible_reports_minimum() {
        let t = table(&[&[1600, 1400]], 10_000, 0);
        let err = rate_target_plan(&t, 0.0001, &PlanOptions::default()).unwrap_err();
        assert!(err.to_string().contains("0.140000"), "{err}");
    }

    #[test]
    fn non_monotone_rejected() {
        let t = table(&[&[100, 120]], 100, 5);
        let err = rate_target_plan(&t, 10.0, &PlanOptions::default()).unwrap_err();
        assert!(err.to_string().contains("qp 5"), "{err}");
    }

    #[test]
    fn wide_mix_only_when_asked() {
        let t = table(&[&[2000, 1100, 1000], &[9000, 5000, 1000]], 10_000, 0);
        let narrow = rate_target_plan(&t, 0.2, &PlanOptions::default()).unwrap();
        assert_eq!(narrow.qp_spread(), 1);
        assert_eq!(narrow.achieved_bpp, 2100.0 / 20_000.0);
        let wide = rate_target_plan(&t, 0.2, &PlanOptions { mix_span: 3, ..PlanOptions::default() }).unwrap();
        assert_eq!(wide.qp_spread(), 2);
        assert_eq!(wide.achieved_bpp, 3000.0 / 20_000.0);
    }

    #[test]
    fn text_serialization() {
        let t = table(&[&[1600, 1400], &[1600, 1400]], 10_000, 3);
        let plan = rate_target_plan(&t, 0.15, &PlanOptions::default()).unwrap();
        let text = plan.to_text();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "path,qp,bits,bpp");
        assert_eq!(lines[1], "img0,3,1600,0.160000");
        assert!(lines[3].starts_with("# summary images=2"));
    }
}
