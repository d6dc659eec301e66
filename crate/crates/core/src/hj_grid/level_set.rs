use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::{GridError, GridSpec, GridValueFunction};

/// Zero-level-set points grouped by connected component. In 2D each
/// component is an ordered polyline (closed loops repeat their first
/// point at the end); in 3D it is the unordered set of edge crossings of
/// one connected surface patch.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LevelSet {
    pub components: Vec<Vec<Vec<f64>>>,
}

impl LevelSet {
    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn points(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.components.iter().flatten()
    }
}

fn inside(v: f64) -> bool {
    v >= 0.0
}

/// Edge from node `k` one step along `axis`, if it exists and crosses zero.
fn crossing(spec: &GridSpec, field: &[f64], k: usize, axis: usize) -> Option<Vec<f64>> {
    let idx = spec.multi_index(k);
    if idx[axis] + 1 >= spec.axes[axis].count {
        return None;
    }
    let j = k + spec.strides()[axis];
    let (va, vb) = (field[k], field[j]);
    if inside(va) == inside(vb) {
        return None;
    }
    let t = va / (va - vb);
    let mut x = spec.node(k);
    x[axis] += t * spec.axes[axis].spacing();
    Some(x)
}

pub fn zero_level_set(vf: &GridValueFunction, tau: f64) -> Result<LevelSet, GridError> {
    let field = vf.field_at(tau)?;
    Ok(match vf.spec.dim() {
        1 => one_d(&vf.spec, &field),
        2 => marching_squares(&vf.spec, &field),
        _ => crossing_patches(&vf.spec, &field),
    })
}

fn one_d(spec: &GridSpec, field: &[f64]) -> LevelSet {
    LevelSet {
        components: (0..spec.len())
            .filter_map(|k| crossing(spec, field, k, 0))
            .map(|p| vec![p])
            .collect(),
    }
}

fn marching_squares(spec: &GridSpec, field: &[f64]) -> LevelSet {
    let (n0, n1) = (spec.axes[0].count, spec.axes[1].count);
    let edge_id = |k: usize, axis: usize| 2 * k + axis;
    let mut points: HashMap<usize, Vec<f64>> = HashMap::new();
    let mut segments: Vec<(usize, usize)> = Vec::new();

    for i in 0..n0 - 1 {
        for j in 0..n1 - 1 {
            let c = [
                i * n1 + j,
                (i + 1) * n1 + j,
                (i + 1) * n1 + j + 1,
                i * n1 + j + 1,
            ];
            // cell edges in cyclic order: c0-c1, c1-c2, c3-c2, c0-c3
            let edges = [(c[0], 0), (c[1], 1), (c[3], 0), (c[0], 1)];
            let mut crossed = Vec::with_capacity(4);
            for (e, &(k, axis)) in edges.iter().enumerate() {
                let id = edge_id(k, axis);
                if points.contains_key(&id) {
                    crossed.push(e);
                } else if let Some(p) = crossing(spec, field, k, axis) {
                    points.insert(id, p);
                    crossed.push(e);
                }
            }
            let id = |e: usize| edge_id(edges[e].0, edges[e].1);
            match crossed.len() {
                2 => segments.push((id(crossed[0]), id(crossed[1]))),
                4 => {
                    let center = c.iter().map(|&k| field[k]).sum::<f64>() / 4.0;
                    if inside(center) == inside(field[c[0]]) {
                        // c1 and c3 are cut off
                        segments.push((id(0), id(1)));
                        segments.push((id(2), id(3)));
                    } else {
                        segments.push((id(3), id(0)));
                        segments.push((id(1), id(2)));
                    }
                }
                _ => {}
            }
        }
    }

    let mut by_edge: HashMap<usize, Vec<usize>> = HashMap::new();
    for (s, &(a, b)) in segments.iter().enumerate() {
        by_edge.entry(a).or_default().push(s);
        by_edge.entry(b).or_default().push(s);
    }
    let mut used = vec![false; segments.len()];
    let mut components = Vec::new();

    let walk = |start_edge: usize, used: &mut Vec<bool>| -> Vec<Vec<f64>> {
        let mut chain = vec![points[&start_edge].clone()];
        let mut edge = start_edge;
        loop {
            let next = by_edge[&edge].iter().copied().find(|&s| !used[s]);
            let Some(s) = next else { break };
            used[s] = true;
            let (a, b) = segments[s];
            edge = if a == edge { b } else { a };
            chain.push(points[&edge].clone());
        }
        chain
    };

    // open chains start at edges touched by one segment (the grid border)
    let mut starts: Vec<usize> = by_edge
        .iter()
        .filter(|(_, s)| s.len() == 1)
        .map(|(&e, _)| e)
        .collect();
    starts.sort_unstable();
    for e in starts {
        if by_edge[&e].iter().all(|&s| used[s]) {
            continue;
        }
        components.push(walk(e, &mut used));
    }
    for s in 0..segments.len() {
        if !used[s] {
            components.push(walk(segments[s].0, &mut used));
        }
    }
    LevelSet { components }
}

fn crossing_patches(spec: &GridSpec, field: &[f64]) -> LevelSet {
    let n = spec.dim();
    let strides = spec.strides();
    let mut points: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for k in 0..spec.len() {
        for axis in 0..n {
            if let Some(p) = crossing(spec, field, k, axis) {
                points.insert(n * k + axis, p);
            }
        }
    }
    let ids: Vec<usize> = points.keys().copied().collect();
    let pos: HashMap<usize, usize> = ids.iter().enumerate().map(|(i, &e)| (e, i)).collect();
    let mut parent: Vec<usize> = (0..ids.len()).collect();
    fn root(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }

    // crossings on edges of the same cell belong to the same patch
    for k in 0..spec.len() {
        let idx = spec.multi_index(k);
        if (0..n).any(|d| idx[d] + 1 >= spec.axes[d].count) {
            continue;
        }
        let mut in_cell = Vec::new();
        for corner in 0..(1usize << n) {
            let base: usize = (0..n)
                .filter(|d| corner >> d & 1 == 1)
                .map(|d| strides[d])
                .sum::<usize>()
                + k;
            for axis in 0..n {
                if corner >> axis & 1 == 0 {
                    if let Some(&p) = pos.get(&(n * base + axis)) {
                        in_cell.push(p);
                    }
                }
            }
        }
        for w in in_cell.windows(2) {
            let (a, b) = (root(&mut parent, w[0]), root(&mut parent, w[1]));
            if a != b {
                parent[a.max(b)] = a.min(b);
            }
        }
    }

    let mut groups: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
    for (i, id) in ids.iter().enumerate() {
        let r = root(&mut parent, i);
        groups.entry(r).or_default().push(points[id].clone());
    }
    LevelSet {
        components: groups.into_values().collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::super::Axis;
    use super::*;

    fn vf(spec: GridSpec, f: impl Fn(&[f64]) -> f64) -> GridValueFunction {
        let field = (0..spec.len()).map(|k| f(&spec.node(k))).collect();
        GridValueFunction {
            spec,
            slices: vec![field],
            gamma: 0.0,
            dt: 0.1,
            system_id: "t".into(),
        }
    }

    fn square() -> GridSpec {
        GridSpec::new(vec![
            Axis::new(-4.0, 4.0, 81).unwrap(),
            Axis::new(-1.0, 1.0, 21).unwrap(),
        ])
        .unwrap()
    }

    #[test]
    fn corridor_edges_at_three() {
        let ls = zero_level_set(&vf(square(), |x| 3.0 - x[0].abs()), 0.0).unwrap();
        assert_eq!(ls.components.len(), 2);
        for c in &ls.components {
            assert_eq!(c.len(), 21);
            for p in c {
                assert!((p[0].abs() - 3.0).abs() < 1e-9);
            }
            // ordered along the heading axis
            let phis: Vec<f64> = c.iter().map(|p| p[1]).collect();
            assert!(phis.windows(2).all(|w| (w[1] - w[0]).abs() > 0.05));
        }
    }

    #[test]
    fn positive_field_has_no_contour() {
        assert!(zero_level_set(&vf(square(), |_| 1.0), 0.0)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn circle_is_one_closed_loop() {
        let spec = GridSpec::new(vec![
            Axis::new(-2.0, 2.0, 41).unwrap(),
            Axis::new(-2.0, 2.0, 41).unwrap(),
        ])
        .unwrap();
        let ls =
            zero_level_set(&vf(spec, |x| 1.0 - (x[0] * x[0] + x[1] * x[1]).sqrt()), 0.0).unwrap();
        assert_eq!(ls.components.len(), 1);
        let c = &ls.components[0];
        assert_eq!(c.first(), c.last());
        for p in c {
            assert!(((p[0] * p[0] + p[1] * p[1]).sqrt() - 1.0).abs() < 0.02);
        }
    }

    #[test]
    fn two_spheres_are_two_patches() {
        let spec = GridSpec::new(vec![
            Axis::new(-3.0, 3.0, 31).unwrap(),
            Axis::new(-1.5, 1.5, 16).unwrap(),
            Axis::new(-1.5, 1.5, 16).unwrap(),
        ])
        .unwrap();
        let ball =
            |x: &[f64], c: f64| 1.0 - ((x[0] - c).powi(2) + x[1] * x[1] + x[2] * x[2]).sqrt();
        let ls = zero_level_set(&vf(spec, |x| ball(x, -1.6).max(ball(x, 1.6))), 0.0).unwrap();
        assert_eq!(ls.components.len(), 2);
    }

    #[test]
    fn one_dimensional_crossings() {
        let spec = GridSpec::new(vec![Axis::new(-4.0, 4.0, 9).unwrap()]).unwrap();
        let ls = zero_level_set(&vf(spec, |x| 2.5 - x[0].abs()), 0.0).unwrap();
        let mut xs: Vec<f64> = ls.points().map(|p| p[0]).collect();
        xs.sort_by(f64::total_cmp);
        assert_eq!(xs, vec![-2.5, 2.5]);
    }
}
