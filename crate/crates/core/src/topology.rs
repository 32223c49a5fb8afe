//! Connected components and hole counting on 2D binary masks.

use std::collections::VecDeque;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Connectivity {
    Four,
    Eight,
}

impl Connectivity {
    fn offsets(self) -> &'static [(isize, isize)] {
        match self {
            Connectivity::Four => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
            Connectivity::Eight => &[(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)],
        }
    }
}

/// Label the `true` pixels of `mask` by component. Returns per-pixel component ids
/// (0 = not in mask, 1.. = component) and the number of components.
pub fn label_components(mask: &[bool], h: usize, w: usize, conn: Connectivity) -> (Vec<u32>, usize) {
    assert_eq!(mask.len(), h * w);
    let mut ids = vec![0u32; h * w];
    let mut count = 0;
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if !mask[start] || ids[start] != 0 {
            continue;
        }
        count += 1;
        ids[start] = count as u32;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            let (y, x) = ((p / w) as isize, (p % w) as isize);
            for &(dy, dx) in conn.offsets() {
                let (ny, nx) = (y + dy, x + dx);
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let q = ny as usize * w + nx as usize;
                if mask[q] && ids[q] == 0 {
                    ids[q] = count as u32;
                    queue.push_back(q);
                }
            }
        }
    }
    (ids, count)
}

pub fn count_components(mask: &[bool], h: usize, w: usize) -> usize {
    label_components(mask, h, w, Connectivity::Four).1
}

/// Sizes of each 4-connected component, indexed by `id - 1`.
pub fn component_sizes(ids: &[u32], count: usize) -> Vec<usize> {
    let mut sizes = vec![0; count];
    for &id in ids {
        if id > 0 {
            sizes[id as usize - 1] += 1;
        }
    }
    sizes
}

/// Keep only the largest 4-connected component (ties: lowest id).
pub fn keep_largest(mask: &mut [bool], h: usize, w: usize) {
    let (ids, count) = label_components(mask, h, w, Connectivity::Four);
    if count <= 1 {
        return;
    }
    let sizes = component_sizes(&ids, count);
    let best = (0..count).max_by_key(|&i| (sizes[i], std::cmp::Reverse(i))).unwrap() as u32 + 1;
    for (m, &id) in mask.iter_mut().zip(&ids) {
        *m = id == best;
    }
}

/// Enclosed background regions of a mask: 8-connected components of the complement,
/// inside the mask's bounding box padded by one pixel, that do not reach the padded
/// frame. Returns per-pixel hole ids over the full image and the hole count.
pub fn holes(mask: &[bool], h: usize, w: usize) -> (Vec<u32>, usize) {
    let mut out = vec![0u32; h * w];
    let Some((y0, y1, x0, x1)) = bounding_box(mask, h, w) else { return (out, 0) };
    let (bh, bw) = (y1 - y0 + 3, x1 - x0 + 3);
    let mut comp = vec![true; bh * bw];
    for y in y0..=y1 {
        for x in x0..=x1 {
            comp[(y - y0 + 1) * bw + (x - x0 + 1)] = !mask[y * w + x];
        }
    }
    let (ids, count) = label_components(&comp, bh, bw, Connectivity::Eight);
    let mut touches = vec![false; count + 1];
    for y in 0..bh {
        for x in 0..bw {
            if y == 0 || x == 0 || y == bh - 1 || x == bw - 1 {
                touches[ids[y * bw + x] as usize] = true;
            }
        }
    }
    let mut remap = vec![0u32; count + 1];
    let mut n = 0;
    for id in 1..=count {
        if !touches[id] {
            n += 1;
            remap[id] = n as u32;
        }
    }
    for y in y0..=y1 {
        for x in x0..=x1 {
            out[y * w + x] = remap[ids[(y - y0 + 1) * bw + (x - x0 + 1)] as usize];
        }
    }
    (out, n)
}

pub fn count_holes(mask: &[bool], h: usize, w: usize) -> usize {
    holes(mask, h, w).1
}

/// Inclusive (y0, y1, x0, x1) of the set pixels.
pub fn bounding_box(mask: &[bool], h: usize, w: usize) -> Option<(usize, usize, usize, usize)> {
    let mut bb: Option<(usize, usize, usize, usize)> = None;
    for y in 0..h {
        for x in 0..w {
            if mask[y * w + x] {
                bb = Some(match bb {
                    None => (y, y, x, x),
                    Some((a, b, c, d)) => (a.min(y), b.max(y), c.min(x), d.max(x)),
                });
            }
        }
    }
    bb
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(rows: &[&str]) -> (Vec<bool>, usize, usize) {
        let h = rows.len();
        let w = rows[0].len();
        (rows.iter().flat_map(|r| r.chars().map(|c| c == '#')).collect(), h, w)
    }

    #[test]
    fn diagonal_pixels_are_separate_under_four_connectivity() {
        let (m, h, w) = parse(&["#..", ".#.", "..#"]);
        assert_eq!(count_components(&m, h, w), 3);
        assert_eq!(label_components(&m, h, w, Connectivity::Eight).1, 1);
    }

    #[test]
    fn ring_has_one_hole_and_touching_border_is_fine() {
        let (m, h, w) = parse(&["###", "#.#", "###"]);
        assert_eq!(count_components(&m, h, w), 1);
        assert_eq!(count_holes(&m, h, w), 1);
        // a 4-connected ring whose inside leaks diagonally has no hole
        let (m, h, w) = parse(&[".#.", "#.#", ".#."]);
        assert_eq!(count_holes(&m, h, w), 0);
    }

    #[test]
    fn two_holes_and_largest_component() {
        let (m, h, w) = parse(&["#####", "#.#.#", "#####", ".....", "..#.."]);
        assert_eq!(count_holes(&m, h, w), 2);
        let mut k = m.clone();
        keep_largest(&mut k, h, w);
        assert_eq!(count_components(&k, h, w), 1);
        assert!(!k[4 * 5 + 2]);
        assert_eq!(bounding_box(&k, h, w), Some((0, 2, 0, 4)));
    }

    #[test]
    fn empty_mask() {
        let m = vec![false; 16];
        assert_eq!(count_components(&m, 4, 4), 0);
        assert_eq!(count_holes(&m, 4, 4), 0);
    }
}
