//! Label-map derived targets: boundaries, skeletons and convex hulls.

use crate::image::LabelMap;

const N4: [(isize, isize); 4] = [(0, -1), (1, 0), (0, 1), (-1, 0)];

fn neighbor(
    x: usize,
    y: usize,
    dx: isize,
    dy: isize,
    w: usize,
    h: usize,
) -> Option<(usize, usize)> {
    let nx = x as isize + dx;
    let ny = y as isize + dy;
    (nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h)
        .then_some((nx as usize, ny as usize))
}

/// Keeps foreground pixels with a 4-neighbor of a different id. Neighbors
/// outside the image do not count.
pub fn edge_labels(labels: &LabelMap) -> LabelMap {
    let (w, h) = labels.dims();
    let mut out = LabelMap::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let id = labels.get(x, y);
            if id == 0 {
                continue;
            }
            let boundary = N4.iter().any(|&(dx, dy)| {
                neighbor(x, y, dx, dy, w, h).is_some_and(|(nx, ny)| labels.get(nx, ny) != id)
            });
            if boundary {
                out.set(x, y, id);
            }
        }
    }
    out
}

/// Marks mask pixels with a 4-neighbor outside the mask (inside the image).
pub fn mask_contour(mask: &[bool], w: usize, h: usize) -> Vec<bool> {
    let mut out = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            if !mask[y * w + x] {
                continue;
            }
            out[y * w + x] = N4.iter().any(|&(dx, dy)| {
                neighbor(x, y, dx, dy, w, h).is_some_and(|(nx, ny)| !mask[ny * w + nx])
            });
        }
    }
    out
}

/// Zhang-Suen thinning of a binary mask. Pixels outside the image are
/// treated as background.
pub fn zhang_suen_thin(mask: &[bool], w: usize, h: usize) -> Vec<bool> {
    let mut img = mask.to_vec();
    let at = |img: &[bool], x: isize, y: isize| -> u8 {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            0
        } else {
            u8::from(img[y as usize * w + x as usize])
        }
    };
    let mut to_clear = Vec::new();
    loop {
        let mut changed = false;
        for pass in 0..2 {
            to_clear.clear();
            for y in 0..h as isize {
                for x in 0..w as isize {
                    if at(&img, x, y) == 0 {
                        continue;
                    }
                    // P2..P9 clockwise from north.
                    let p = [
                        at(&img, x, y - 1),
                        at(&img, x + 1, y - 1),
                        at(&img, x + 1, y),
                        at(&img, x + 1, y + 1),
                        at(&img, x, y + 1),
                        at(&img, x - 1, y + 1),
                        at(&img, x - 1, y),
                        at(&img, x - 1, y - 1),
                    ];
                    let b: u8 = p.iter().sum();
                    if !(2..=6).contains(&b) {
                        continue;
                    }
                    let a = (0..8).filter(|&i| p[i] == 0 && p[(i + 1) % 8] == 1).count();
                    if a != 1 {
                        continue;
                    }
                    let (p2, p4, p6, p8) = (p[0], p[2], p[4], p[6]);
                    let ok = if pass == 0 {
                        p2 * p4 * p6 == 0 && p4 * p6 * p8 == 0
                    } else {
                        p2 * p4 * p8 == 0 && p2 * p6 * p8 == 0
                    };
                    if ok {
                        to_clear.push(y as usize * w + x as usize);
                    }
                }
            }
            for &i in &to_clear {
                img[i] = false;
            }
            changed |= !to_clear.is_empty();
        }
        if !changed {
            return img;
        }
    }
}

/// Per-class Zhang-Suen skeletons, painted with the class id.
pub fn skeleton_labels(labels: &LabelMap) -> LabelMap {
    let (w, h) = labels.dims();
    let mut out = LabelMap::zeros(w, h);
    for id in labels.unique_ids().into_iter().filter(|&id| id != 0) {
        let skel = zhang_suen_thin(&labels.mask_of(id), w, h);
        for (i, s) in skel.iter().enumerate() {
            if *s {
                out.set(i % w, i / w, id);
            }
        }
    }
    out
}

/// 8-connected components as lists of `(x, y)` pixels.
pub fn connected_components(mask: &[bool], w: usize, h: usize) -> Vec<Vec<(usize, usize)>> {
    let mut seen = vec![false; w * h];
    let mut comps = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        if !mask[start] || seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        seen[start] = true;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (x, y) = (i % w, i / w);
            comp.push((x, y));
            for dy in -1..=1 {
                for dx in -1..=1 {
                    if let Some((nx, ny)) = neighbor(x, y, dx, dy, w, h) {
                        let j = ny * w + nx;
                        if mask[j] && !seen[j] {
                            seen[j] = true;
                            stack.push(j);
                        }
                    }
                }
            }
        }
        comps.push(comp);
    }
    comps
}

fn cross(o: (i64, i64), a: (i64, i64), b: (i64, i64)) -> i64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Andrew's monotone chain; returns the hull counter-clockwise without
/// collinear points. Degenerate inputs yield one or two points.
pub fn convex_hull(points: &[(i64, i64)]) -> Vec<(i64, i64)> {
    let mut pts = points.to_vec();
    pts.sort_unstable();
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut lower: Vec<(i64, i64)> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<(i64, i64)> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

fn inside_hull(hull: &[(i64, i64)], p: (i64, i64)) -> bool {
    match hull.len() {
        0 => false,
        1 => hull[0] == p,
        2 => {
            let (a, b) = (hull[0], hull[1]);
            cross(a, b, p) == 0
                && p.0 >= a.0.min(b.0)
                && p.0 <= a.0.max(b.0)
                && p.1 >= a.1.min(b.1)
                && p.1 <= a.1.max(b.1)
        }
        n => (0..n).all(|i| cross(hull[i], hull[(i + 1) % n], p) >= 0),
    }
}

/// Fills the convex hull of every connected component of every class;
/// higher class ids overwrite lower ones where hulls overlap.
pub fn coarse_labels(labels: &LabelMap) -> LabelMap {
    let (w, h) = labels.dims();
    let mut out = LabelMap::zeros(w, h);
    for id in labels.unique_ids().into_iter().filter(|&id| id != 0) {
        for comp in connected_components(&labels.mask_of(id), w, h) {
            let pts: Vec<(i64, i64)> = comp.iter().map(|&(x, y)| (x as i64, y as i64)).collect();
            let hull = convex_hull(&pts);
            let (x0, x1) = (
                comp.iter().map(|p| p.0).min().unwrap_or(0),
                comp.iter().map(|p| p.0).max().unwrap_or(0),
            );
            let (y0, y1) = (
                comp.iter().map(|p| p.1).min().unwrap_or(0),
                comp.iter().map(|p| p.1).max().unwrap_or(0),
            );
            for y in y0..=y1 {
                for x in x0..=x1 {
                    if inside_hull(&hull, (x as i64, y as i64)) {
                        out.set(x, y, id);
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map_from(w: usize, h: usize, mut f: impl FnMut(usize, usize) -> u8) -> LabelMap {
        let ids = (0..h)
            .flat_map(|y| (0..w).map(move |x| (x, y)))
            .map(|(x, y)| f(x, y))
            .collect();
        LabelMap::from_vec(w, h, ids).unwrap()
    }

    fn square(side: usize, lo: usize, hi: usize) -> LabelMap {
        map_from(side, side, |x, y| {
            u8::from((lo..hi).contains(&x) && (lo..hi).contains(&y))
        })
    }

    #[test]
    fn filled_square_edges_are_its_perimeter() {
        let labels = square(16, 3, 13);
        let edges = edge_labels(&labels);
        // Oracle: perimeter of a 10x10 block by coordinates.
        let mut expected = 0;
        for y in 3..13 {
            for x in 3..13 {
                let on_rim = x == 3 || x == 12 || y == 3 || y == 12;
                assert_eq!(edges.get(x, y) == 1, on_rim, "({x},{y})");
                expected += usize::from(on_rim);
            }
        }
        assert_eq!(expected, 36);
        assert_eq!(edges.ids().iter().filter(|&&v| v == 1).count(), 36);
    }

    #[test]
    fn thin_stripe_is_its_own_skeleton() {
        let labels = map_from(20, 9, |x, y| u8::from(y == 4 && (2..18).contains(&x)));
        assert_eq!(skeleton_labels(&labels), labels);
        let full_width = map_from(20, 9, |_, y| u8::from(y == 4));
        assert_eq!(skeleton_labels(&full_width), full_width);
    }

    #[test]
    fn thick_bar_skeleton_is_thin_subset() {
        let labels = map_from(30, 12, |x, y| {
            u8::from((3..9).contains(&y) && (2..28).contains(&x)) * 2
        });
        let skel = skeleton_labels(&labels);
        assert!(skel.has_foreground());
        for (s, l) in skel.ids().iter().zip(labels.ids()) {
            assert!(*s == 0 || s == l);
        }
        for x in 6..24 {
            let col = (0..12).filter(|&y| skel.get(x, y) != 0).count();
            assert!(col <= 2, "column {x} has {col} skeleton pixels");
        }
    }

    #[test]
    fn coarse_fills_concavity() {
        // An L shape; its hull adds the triangle between the arms.
        let labels = map_from(12, 12, |x, y| {
            u8::from((x < 3 && y < 10) || (y >= 7 && y < 10 && x < 10))
        });
        let coarse = coarse_labels(&labels);
        for (c, l) in coarse.ids().iter().zip(labels.ids()) {
            assert!(*l == 0 || *c == 1);
        }
        assert_eq!(coarse.get(4, 6), 1);
        assert_eq!(coarse.get(9, 2), 0);
    }

    #[test]
    fn coarse_overlaps_go_to_higher_id() {
        let labels = map_from(10, 10, |x, y| {
            if x == 1 && y < 9 || y == 8 && x < 9 {
                2
            } else if (4..6).contains(&x) && (4..6).contains(&y) {
                1
            } else {
                0
            }
        });
        let coarse = coarse_labels(&labels);
        assert_eq!(coarse.get(4, 4), 2);
    }

    #[test]
    fn hull_of_collinear_points_is_segment() {
        let hull = convex_hull(&[(0, 0), (2, 0), (5, 0)]);
        assert_eq!(hull.len(), 2);
        assert!(inside_hull(&hull, (3, 0)));
        assert!(!inside_hull(&hull, (3, 1)));
    }

    #[test]
    fn background_only_maps_stay_empty() {
        let labels = LabelMap::zeros(8, 8);
        for f in [edge_labels, skeleton_labels, coarse_labels] {
            assert!(!f(&labels).has_foreground());
        }
    }

    fn rect_strategy() -> impl Strategy<Value = (usize, usize, usize, usize)> {
        (0usize..10, 0usize..10, 3usize..10, 3usize..10)
    }

    proptest! {
        #[test]
        fn edges_of_rectangles_have_no_full_2x2_block((x0, y0, rw, rh) in rect_strategy()) {
            let labels = map_from(24, 24, |x, y| u8::from((x0..x0 + rw).contains(&x) && (y0..y0 + rh).contains(&y)));
            let e = edge_labels(&labels);
            for y in 0..23 {
                for x in 0..23 {
                    let full = e.get(x, y) != 0 && e.get(x + 1, y) != 0 && e.get(x, y + 1) != 0 && e.get(x + 1, y + 1) != 0;
                    prop_assert!(!full);
                }
            }
        }

        #[test]
        fn skeleton_subset_and_hull_superset(seed in 0u64..10_000) {
            let mut s = seed;
            let labels = map_from(20, 20, |_, _| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 60) % 3) as u8
            });
            let skel = skeleton_labels(&labels);
            let coarse_per_class: Vec<LabelMap> = (1..3u8)
                .map(|id| coarse_labels(&map_from(20, 20, |x, y| u8::from(labels.get(x, y) == id))))
                .collect();
            for y in 0..20 {
                for x in 0..20 {
                    let id = labels.get(x, y);
                    let sk = skel.get(x, y);
                    prop_assert!(sk == 0 || sk == id);
                    if id != 0 {
                        prop_assert_eq!(coarse_per_class[id as usize - 1].get(x, y), 1);
                    }
                }
            }
        }
    }
}
