//! Two-objective NSGA-II primitives (both objectives minimized).

use std::cmp::Ordering;

pub type Objectives = [f64; 2];

/// `a` dominates `b`: no worse in every objective and better in at least one.
pub fn dominates(a: &Objectives, b: &Objectives) -> bool {
    a[0] <= b[0] && a[1] <= b[1] && (a[0] < b[0] || a[1] < b[1])
}

/// `a` is no worse than `b` in every objective.
pub fn weakly_dominates(a: &Objectives, b: &Objectives) -> bool {
    a[0] <= b[0] && a[1] <= b[1]
}

/// Fast nondominated sort. Returns fronts of indices; front 0 is the
/// nondominated set. Indices within a front are ascending.
pub fn nondominated_sort(points: &[Objectives]) -> Vec<Vec<usize>> {
    let n = points.len();
    let mut dominated_by_count = vec![0usize; n];
    let mut dominates_list: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..n {
        for j in (i + 1)..n {
            if dominates(&points[i], &points[j]) {
                dominates_list[i].push(j);
                dominated_by_count[j] += 1;
            } else if dominates(&points[j], &points[i]) {
                dominates_list[j].push(i);
                dominated_by_count[i] += 1;
            }
        }
    }
    let mut fronts = Vec::new();
    let mut current: Vec<usize> = (0..n).filter(|&i| dominated_by_count[i] == 0).collect();
    while !current.is_empty() {
        let mut next = Vec::new();
        for &i in &current {
            for &j in &dominates_list[i] {
                dominated_by_count[j] -= 1;
                if dominated_by_count[j] == 0 {
                    next.push(j);
                }
            }
        }
        next.sort_unstable();
        fronts.push(current);
        current = next;
    }
    fronts
}

/// Crowding distance of each member of `front` (given as objective vectors),
/// in the same order.
pub fn crowding_distance(front: &[Objectives]) -> Vec<f64> {
    let n = front.len();
    let mut dist = vec![0.0; n];
    if n <= 2 {
        return vec![f64::INFINITY; n];
    }
    for m in [0, 1] {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| front[a][m].total_cmp(&front[b][m]).then(a.cmp(&b)));
        let lo = front[order[0]][m];
        let hi = front[order[n - 1]][m];
        dist[order[0]] = f64::INFINITY;
        dist[order[n - 1]] = f64::INFINITY;
        let range = hi - lo;
        if range <= 0.0 || !range.is_finite() {
            continue;
        }
        for k in 1..n - 1 {
            let i = order[k];
            if dist[i].is_finite() {
                dist[i] += (front[order[k + 1]][m] - front[order[k - 1]][m]) / range;
            }
        }
    }
    dist
}

/// Rank and crowding distance for every point.
#[derive(Debug, Clone, PartialEq)]
pub struct Ranking {
    pub fronts: Vec<Vec<usize>>,
    pub rank: Vec<usize>,
    pub crowding: Vec<f64>,
}

pub fn rank_population(points: &[Objectives]) -> Ranking {
    let fronts = nondominated_sort(points);
    let mut rank = vec![0; points.len()];
    let mut crowding = vec![0.0; points.len()];
    for (r, front) in fronts.iter().enumerate() {
        let objs: Vec<Objectives> = front.iter().map(|&i| points[i]).collect();
        for (&i, d) in front.iter().zip(crowding_distance(&objs)) {
            rank[i] = r;
            crowding[i] = d;
        }
    }
    Ranking { fronts, rank, crowding }
}

impl Ranking {
    /// NSGA-II crowded comparison: lower rank first, then larger crowding,
    /// then lower index.
    pub fn compare(&self, a: usize, b: usize) -> Ordering {
        self.rank[a]
            .cmp(&self.rank[b])
            .then(self.crowding[b].total_cmp(&self.crowding[a]))
            .then(a.cmp(&b))
    }

    /// All indices sorted best first.
    pub fn order(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.rank.len()).collect();
        idx.sort_by(|&a, &b| self.compare(a, b));
        idx
    }
}

/// Area dominated by `points` and bounded by `reference` (minimization).
/// Points that do not strictly dominate the reference contribute nothing.
pub fn hypervolume_2d(points: &[Objectives], reference: Objectives) -> f64 {
    let mut pts: Vec<Objectives> = points
        .iter()
        .copied()
        .filter(|p| p[0] < reference[0] && p[1] < reference[1])
        .collect();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    let mut area = 0.0;
    let mut ceiling = reference[1];
    for p in pts {
        if p[1] < ceiling {
            area += (reference[0] - p[0]) * (ceiling - p[1]);
            ceiling = p[1];
        }
    }
    area
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_fronts() {
        assert_eq!(nondominated_sort(&[[1.0, 1.0]]), vec![vec![0]]);
        assert_eq!(nondominated_sort(&[[1.0, 2.0], [2.0, 1.0]]), vec![vec![0, 1]]);
        assert_eq!(nondominated_sort(&[[2.0, 2.0], [1.0, 1.0]]), vec![vec![1], vec![0]]);
        assert!(nondominated_sort(&[]).is_empty());
        // Duplicates do not dominate each other.
        assert_eq!(nondominated_sort(&[[1.0, 1.0], [1.0, 1.0]]), vec![vec![0, 1]]);
    }

    #[test]
    fn crowding_fixture() {
        let d = crowding_distance(&[[0.0, 2.0], [1.0, 1.0], [2.0, 0.0]]);
        assert!(d[0].is_infinite() && d[2].is_infinite());
        assert_eq!(d[1], 2.0);
        assert!(crowding_distance(&[[0.0, 1.0], [1.0, 0.0]]).iter().all(|v| v.is_infinite()));
        let dup = crowding_distance(&[[0.0, 2.0], [1.0, 1.0], [1.0, 1.0], [2.0, 0.0]]);
        assert!(dup.iter().all(|v| *v >= 0.0 && !v.is_nan()));
        assert!(dup[1].is_finite() && dup[2].is_finite());
        let flat = crowding_distance(&[[0.0, 5.0], [1.0, 5.0], [2.0, 5.0]]);
        assert_eq!(flat[1], 1.0);
    }

    #[test]
    fn hypervolume_hand_cases() {
        assert_eq!(hypervolume_2d(&[[1.0, 1.0]], [3.0, 3.0]), 4.0);
        // Staircase: (1,2),(2,1) against (3,3): 2*1 + 1*1 + ... = 3
        assert_eq!(hypervolume_2d(&[[1.0, 2.0], [2.0, 1.0]], [3.0, 3.0]), 3.0);
        assert_eq!(hypervolume_2d(&[[1.0, 2.0], [2.0, 1.0], [2.5, 2.5]], [3.0, 3.0]), 3.0);
        assert_eq!(hypervolume_2d(&[[4.0, 0.0]], [3.0, 3.0]), 0.0);
    }
}
