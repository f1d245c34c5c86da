use std::collections::VecDeque;

use super::BinaryMask;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connectivity {
    Four,
    Eight,
}

impl Connectivity {
    fn offsets(self) -> &'static [(isize, isize)] {
        match self {
            Connectivity::Four => &[(1, 0), (-1, 0), (0, 1), (0, -1)],
            Connectivity::Eight => &[(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1)],
        }
    }
}

impl TryFrom<u8> for Connectivity {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            4 => Ok(Connectivity::Four),
            8 => Ok(Connectivity::Eight),
            _ => Err(Error::invalid(format!("connectivity must be 4 or 8, got {v}"))),
        }
    }
}

/// Offsets `(dx, dy)` with `dx² + dy² ≤ r²`.
fn disc(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                out.push((dx, dy));
            }
        }
    }
    out
}

/// Minkowski sum with a disc of the given radius.
pub fn dilate(mask: &BinaryMask, se_radius: usize) -> BinaryMask {
    let se = disc(se_radius);
    let (w, h) = (mask.width(), mask.height());
    let mut out = BinaryMask::new(w, h);
    for (x, y) in mask.points() {
        for &(dx, dy) in &se {
            let (nx, ny) = (x as isize + dx, y as isize + dy);
            if nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h {
                out.set(nx as usize, ny as usize, true);
            }
        }
    }
    out
}

/// Keeps pixels whose whole disc neighbourhood is set; outside the image
/// counts as unset.
pub fn erode(mask: &BinaryMask, se_radius: usize) -> BinaryMask {
    let se = disc(se_radius);
    let mut out = BinaryMask::new(mask.width(), mask.height());
    for (x, y) in mask.points() {
        if se
            .iter()
            .all(|&(dx, dy)| mask.get_signed(x as isize + dx, y as isize + dy))
        {
            out.set(x, y, true);
        }
    }
    out
}

/// Closing computed on a canvas padded by the radius, so shapes touching
/// the border are not eaten by the erosion step.
pub fn close(mask: &BinaryMask, se_radius: usize) -> BinaryMask {
    let r = se_radius;
    let (w, h) = (mask.width(), mask.height());
    let mut padded = BinaryMask::new(w + 2 * r, h + 2 * r);
    for (x, y) in mask.points() {
        padded.set(x + r, y + r, true);
    }
    let closed = erode(&dilate(&padded, r), r);
    let mut out = BinaryMask::new(w, h);
    for y in 0..h {
        for x in 0..w {
            out.set(x, y, closed.get(x + r, y + r));
        }
    }
    out
}

/// Component id per pixel (`usize::MAX` = background) and component sizes,
/// numbered in row-major order of each component's first pixel.
pub fn label_components(mask: &BinaryMask, conn: Connectivity) -> (Vec<usize>, Vec<usize>) {
    let (w, h) = (mask.width(), mask.height());
    let mut labels = vec![usize::MAX; w * h];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if !mask.bits()[start] || labels[start] != usize::MAX {
            continue;
        }
        let id = sizes.len();
        let mut size = 0;
        labels[start] = id;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (x, y) = ((i % w) as isize, (i / w) as isize);
            for &(dx, dy) in conn.offsets() {
                let (nx, ny) = (x + dx, y + dy);
                if mask.get_signed(nx, ny) {
                    let j = ny as usize * w + nx as usize;
                    if labels[j] == usize::MAX {
                        labels[j] = id;
                        queue.push_back(j);
                    }
                }
            }
        }
        sizes.push(size);
    }
    (labels, sizes)
}

pub fn component_count(mask: &BinaryMask, conn: Connectivity) -> usize {
    label_components(mask, conn).1.len()
}

/// Largest connected component; on equal sizes the one whose first pixel
/// comes earliest in row-major order wins.
pub fn largest_component(mask: &BinaryMask, conn: Connectivity) -> BinaryMask {
    let (labels, sizes) = label_components(mask, conn);
    let mut out = BinaryMask::new(mask.width(), mask.height());
    let Some(best) = (0..sizes.len()).reduce(|a, b| if sizes[b] > sizes[a] { b } else { a }) else {
        return out;
    };
    for (i, &l) in labels.iter().enumerate() {
        if l == best {
            out.set(i % mask.width(), i / mask.width(), true);
        }
    }
    out
}

/// Sets every background pixel not 4-connected to the image border.
pub fn fill_holes(mask: &BinaryMask) -> BinaryMask {
    let (w, h) = (mask.width(), mask.height());
    let mut outside = vec![false; w * h];
    let mut queue = VecDeque::new();
    for y in 0..h {
        for x in 0..w {
            if (x == 0 || y == 0 || x + 1 == w || y + 1 == h) && !mask.get(x, y) {
                outside[y * w + x] = true;
                queue.push_back((x, y));
            }
        }
    }
    while let Some((x, y)) = queue.pop_front() {
        for &(dx, dy) in Connectivity::Four.offsets() {
            let (nx, ny) = (x as isize + dx, y as isize + dy);
            if nx < 0 || ny < 0 || nx as usize >= w || ny as usize >= h {
                continue;
            }
            let (nx, ny) = (nx as usize, ny as usize);
            if !mask.get(nx, ny) && !outside[ny * w + nx] {
                outside[ny * w + nx] = true;
                queue.push_back((nx, ny));
            }
        }
    }
    BinaryMask::from_bits(w, h, outside.iter().map(|&o| !o).collect()).unwrap()
}

/// Set pixels with an unset 4-neighbour or lying on the image border, in
/// row-major order.
pub fn boundary(mask: &BinaryMask) -> Vec<(usize, usize)> {
    mask.points()
        .into_iter()
        .filter(|&(x, y)| {
            let (x, y) = (x as isize, y as isize);
            Connectivity::Four
                .offsets()
                .iter()
                .any(|&(dx, dy)| !mask.get_signed(x + dx, y + dy))
        })
        .collect()
}

/// Sub-pixel contour samples: the midpoint of every pixel edge separating a
/// set pixel from an unset 4-neighbour. Unlike [`boundary`], these sit on
/// the region's outline rather than half a pixel inside it.
pub fn boundary_edge_points(mask: &BinaryMask) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    for (x, y) in mask.points() {
        for &(dx, dy) in Connectivity::Four.offsets() {
            if !mask.get_signed(x as isize + dx, y as isize + dy) {
                out.push((x as f64 + 0.5 * dx as f64, y as f64 + 0.5 * dy as f64));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_from(rows: &[&str]) -> BinaryMask {
        let h = rows.len();
        let w = rows[0].len();
        let bits = rows.iter().flat_map(|r| r.chars().map(|c| c == '#')).collect();
        BinaryMask::from_bits(w, h, bits).unwrap()
    }

    #[test]
    fn dilate_single_pixel_gives_plus() {
        let mut m = BinaryMask::new(5, 5);
        m.set(2, 2, true);
        let d = dilate(&m, 1);
        assert_eq!(d, mask_from(&[".....", "..#..", ".###.", "..#..", "....."]));
        assert_eq!(erode(&d, 1), m);
    }

    #[test]
    fn closing_contains_convex_input() {
        let m = mask_from(&["........", ".####...", ".####...", ".####...", "........", "........"]);
        for r in 1..3 {
            assert!(m.is_subset_of(&close(&m, r)));
            assert!(m.is_subset_of(&dilate(&m, r)));
            assert!(erode(&m, r).is_subset_of(&m));
        }
    }

    #[test]
    fn largest_component_cases() {
        let m = mask_from(&["##...###", "##...###", "#....###", "........"]);
        let big = largest_component(&m, Connectivity::Four);
        assert_eq!(big.count(), 9);
        assert!(big.get(7, 0) && !big.get(0, 0));

        let single = mask_from(&["..##", "..#."]);
        assert_eq!(largest_component(&single, Connectivity::Eight), single);
        let empty = BinaryMask::new(4, 3);
        assert_eq!(largest_component(&empty, Connectivity::Four), empty);
    }

    #[test]
    fn equal_components_prefer_first_in_scan() {
        let m = mask_from(&["#..#", "....", ".#.."]);
        let c = largest_component(&m, Connectivity::Four);
        assert_eq!(c.points(), vec![(0, 0)]);
    }

    #[test]
    fn connectivity_matters_for_diagonals() {
        let m = mask_from(&["#.", ".#"]);
        assert_eq!(component_count(&m, Connectivity::Four), 2);
        assert_eq!(component_count(&m, Connectivity::Eight), 1);
        assert!(Connectivity::try_from(6).is_err());
    }

    #[test]
    fn boundary_of_block_and_pixel() {
        let m = mask_from(&[".....", ".###.", ".###.", ".###.", "....."]);
        let b = boundary(&m);
        assert_eq!(b.len(), 8);
        assert!(!b.contains(&(2, 2)));
        assert_eq!(b[0], (1, 1));

        let mut p = BinaryMask::new(3, 3);
        p.set(1, 1, true);
        assert_eq!(boundary(&p), vec![(1, 1)]);
        assert_eq!(boundary_edge_points(&p).len(), 4);
    }

    #[test]
    fn fill_holes_closes_ring() {
        let m = mask_from(&["#####", "#...#", "#...#", "#####"]);
        assert_eq!(fill_holes(&m).count(), 20);
        let open = mask_from(&["#####", "....#", "#...#", "#####"]);
        assert_eq!(fill_holes(&open), open);
    }
}
