//! Index structures that drive the attention blocks: farthest point
//! sampling, temporal nearest neighbours, spatiotemporal grouping and the
//! sparse active-site grid. Every tie is broken towards the lower index.

use std::cmp::Ordering;

use crate::error::{Error, Result};

/// Per-query neighbour lists of fixed length `k`, stored flat.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborIndex {
    k: usize,
    indices: Vec<usize>,
}

impl NeighborIndex {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn queries(&self) -> usize {
        if self.k == 0 {
            0
        } else {
            self.indices.len() / self.k
        }
    }

    pub fn neighbors(&self, q: usize) -> &[usize] {
        &self.indices[q * self.k..(q + 1) * self.k]
    }

    /// All lists concatenated in query order.
    pub fn flat(&self) -> &[usize] {
        &self.indices
    }
}

/// Centers chosen by farthest point sampling and their groups.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampledSet {
    pub centers: Vec<usize>,
    pub groups: NeighborIndex,
}

fn sq_dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Greedy farthest point sampling. Starts at `seed % N` and repeatedly adds
/// the point with the largest distance to the selected set. Returns indices
/// in selection order.
pub fn farthest_point_sampling(points: &[[f64; 3]], m_out: usize, seed: u64) -> Result<Vec<usize>> {
    let n = points.len();
    if m_out == 0 || m_out > n {
        return Err(Error::invalid(format!("cannot sample {m_out} of {n} points")));
    }
    let start = (seed % n as u64) as usize;
    let mut selected = Vec::with_capacity(m_out);
    let mut min_d = vec![f64::INFINITY; n];
    let mut taken = vec![false; n];
    let mut cur = start;
    loop {
        selected.push(cur);
        taken[cur] = true;
        if selected.len() == m_out {
            break;
        }
        let p = points[cur];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, (d, q)) in min_d.iter_mut().zip(points).enumerate() {
            let dd = sq_dist(&p, q);
            if dd < *d {
                *d = dd;
            }
            if !taken[i] && *d > best_d {
                best_d = *d;
                best = i;
            }
        }
        cur = best;
    }
    Ok(selected)
}

/// For each event the `m` others with the smallest `|t_j - t_i|`, ordered by
/// distance then index. Lists shorter than `m` are padded by repeating the
/// nearest neighbour; a single event neighbours itself.
pub fn knn_temporal(times: &[f64], m: usize) -> Result<NeighborIndex> {
    if m == 0 {
        return Err(Error::invalid("knn_temporal: M must be at least 1"));
    }
    let n = times.len();
    if n == 0 {
        return Ok(NeighborIndex { k: m, indices: Vec::new() });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]).then(a.cmp(&b)));
    let want = m.min(n - 1);
    let mut indices = Vec::with_capacity(n * m);
    let mut cand: Vec<(f64, usize)> = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if n == 1 {
            indices.extend(std::iter::repeat(i).take(m));
            continue;
        }
        let ti = times[i];
        // Walk outwards until `want` candidates are found, then take every
        // candidate within that radius so ties can be resolved by index.
        let (mut lo, mut hi) = (pos, pos + 1);
        let mut count = 0;
        let mut radius = 0.0f64;
        while count < want {
            let left = (lo > 0).then(|| ti - times[order[lo - 1]]);
            let right = (hi < n).then(|| times[order[hi]] - ti);
            let d = match (left, right) {
                (Some(l), Some(r)) if l <= r => {
                    lo -= 1;
                    l
                }
                (Some(l), None) => {
                    lo -= 1;
                    l
                }
                (_, Some(r)) => {
                    hi += 1;
                    r
                }
                (None, None) => unreachable!(),
            };
            radius = radius.max(d);
            count += 1;
        }
        while lo > 0 && ti - times[order[lo - 1]] <= radius {
            lo -= 1;
        }
        while hi < n && times[order[hi]] - ti <= radius {
            hi += 1;
        }
        cand.clear();
        cand.extend(
            order[lo..hi].iter().filter(|&&j| j != i).map(|&j| ((times[j] - ti).abs(), j)),
        );
        cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let start = indices.len();
        indices.extend(cand[..want].iter().map(|c| c.1));
        let nearest = indices[start];
        indices.extend(std::iter::repeat(nearest).take(m - want));
    }
    // Lists were produced in time order; restore query order.
    let mut out = vec![0; n * m];
    for (pos, &i) in order.iter().enumerate() {
        out[i * m..(i + 1) * m].copy_from_slice(&indices[pos * m..(pos + 1) * m]);
    }
    Ok(NeighborIndex { k: m, indices: out })
}

/// For each center, the `k` points nearest in Euclidean distance. The
/// center itself comes first; the rest are ordered by distance then index.
/// When `k` exceeds the number of points the list is padded with the center.
pub fn group_nearest(points: &[[f64; 3]], centers: &[usize], k: usize) -> Result<NeighborIndex> {
    if k == 0 {
        return Err(Error::invalid("group_nearest: k must be at least 1"));
    }
    let n = points.len();
    if let Some(&c) = centers.iter().find(|&&c| c >= n) {
        return Err(Error::invalid(format!("center {c} out of range for {n} points")));
    }
    let take = k.min(n);
    let mut indices = Vec::with_capacity(centers.len() * k);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n);
    let cmp = |a: &(f64, usize), b: &(f64, usize)| -> Ordering { a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)) };
    for &c in centers {
        let pc = points[c];
        cand.clear();
        cand.extend(points.iter().enumerate().filter(|&(j, _)| j != c).map(|(j, q)| (sq_dist(&pc, q), j)));
        if take > 1 && take - 1 < cand.len() {
            cand.select_nth_unstable_by(take - 2, cmp);
            cand.truncate(take - 1);
        }
        cand.sort_by(cmp);
        indices.push(c);
        indices.extend(cand.iter().take(take - 1).map(|c| c.1));
        indices.extend(std::iter::repeat(c).take(k - take));
    }
    Ok(NeighborIndex { k, indices })
}

/// Events partitioned by integer pixel. Sites are kept in row-major order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SparseGrid {
    height: usize,
    width: usize,
    sites: Vec<(u16, u16)>,
    offsets: Vec<usize>,
    members: Vec<usize>,
    site_of_event: Vec<usize>,
    lookup: Vec<u32>,
}

const NO_SITE: u32 = u32::MAX;

pub fn build_sparse_grid(pixels: &[(u16, u16)], height: usize, width: usize) -> Result<SparseGrid> {
    if let Some(&(y, x)) = pixels.iter().find(|&&(y, x)| y as usize >= height || x as usize >= width) {
        return Err(Error::invalid(format!("pixel ({y}, {x}) outside {height}x{width} grid")));
    }
    let mut order: Vec<usize> = (0..pixels.len()).collect();
    order.sort_by_key(|&i| (pixels[i], i));
    let mut sites = Vec::new();
    let mut offsets = vec![0];
    let mut lookup = vec![NO_SITE; height * width];
    let mut site_of_event = vec![0; pixels.len()];
    for (k, &i) in order.iter().enumerate() {
        let p = pixels[i];
        if sites.last() != Some(&p) {
            if !sites.is_empty() {
                offsets.push(k);
            }
            lookup[p.0 as usize * width + p.1 as usize] = sites.len() as u32;
            sites.push(p);
        }
        site_of_event[i] = sites.len() - 1;
    }
    offsets.push(order.len());
    if sites.is_empty() {
        offsets = vec![0];
    }
    Ok(SparseGrid { height, width, sites, offsets, members: order, site_of_event, lookup })
}

impl SparseGrid {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_sites(&self) -> usize {
        self.sites.len()
    }

    /// `(row, column)` of each active site.
    pub fn sites(&self) -> &[(u16, u16)] {
        &self.sites
    }

    /// Event indices at site `s`, ascending.
    pub fn members(&self, s: usize) -> &[usize] {
        &self.members[self.offsets[s]..self.offsets[s + 1]]
    }

    /// All event indices grouped by site, with segment offsets.
    pub fn member_order(&self) -> (&[usize], &[usize]) {
        (&self.members, &self.offsets)
    }

    pub fn site_of_event(&self) -> &[usize] {
        &self.site_of_event
    }

    pub fn site_at(&self, y: i64, x: i64) -> Option<usize> {
        if y < 0 || x < 0 || y >= self.height as i64 || x >= self.width as i64 {
            return None;
        }
        match self.lookup[y as usize * self.width + x as usize] {
            NO_SITE => None,
            s => Some(s as usize),
        }
    }

    /// Active sites within a `w × w` window centred on `site` (itself
    /// included), in row-major order.
    pub fn window_neighbors(&self, site: usize, w: usize) -> Vec<usize> {
        let r = (w / 2) as i64;
        let (y, x) = (self.sites[site].0 as i64, self.sites[site].1 as i64);
        let mut out = Vec::new();
        for dy in -r..=r {
            for dx in -r..=r {
                if let Some(s) = self.site_at(y + dy, x + dx) {
                    out.push(s);
                }
            }
        }
        out
    }

    /// Site at each of the `k × k` kernel taps around every site (row-major
    /// taps), `None` where the pixel is inactive or outside the frame.
    pub fn kernel_taps(&self, k: usize) -> Vec<Option<usize>> {
        let r = (k / 2) as i64;
        let mut out = Vec::with_capacity(self.sites.len() * k * k);
        for &(y, x) in &self.sites {
            for dy in -r..=r {
                for dx in -r..=r {
                    out.push(self.site_at(y as i64 + dy, x as i64 + dx));
                }
            }
        }
        out
    }
}
