//! HEALPix grids in the nested indexing scheme: construction, neighbor
//! lookup, the pixel hierarchy, and pixel-center angles.
//!
//! The sphere is split into 12 equal-area base tiles; resolution `n_side`
//! subdivides each tile into `n_side * n_side` pixels, giving
//! `n_pix = 12 * n_side^2` pixels of identical solid angle. Nested indices
//! interleave the in-tile (x, y) coordinates bit by bit, so a parent index
//! is `child >> 2` and the four children share the parent's high bits.

use std::f64::consts::{FRAC_PI_4, PI};
use std::io::Write;
use std::sync::OnceLock;

use crate::error::{Error, Result};

/// Number of neighbor slots per pixel.
pub const NEIGHBOR_SLOTS: usize = 8;

/// Sentinel marking an absent neighbor; never a valid pixel index.
const MISSING: u32 = u32::MAX;

/// Neighbor slot order, fixed for the whole crate: SW, W, NW, N, NE, E, SE, S
/// in face-local coordinates where +x points toward the tile's north-east
/// edge and +y toward its north-west edge.
pub const SLOT_NAMES: [&str; NEIGHBOR_SLOTS] = ["SW", "W", "NW", "N", "NE", "E", "SE", "S"];

const SLOT_OFFSETS: [(i64, i64); NEIGHBOR_SLOTS] = [
    (-1, 0),  // SW
    (-1, 1),  // W
    (0, 1),   // NW
    (1, 1),   // N
    (1, 0),   // NE
    (1, -1),  // E
    (0, -1),  // SE
    (-1, -1), // S
];

/// Position of a pixel inside one of the 12 base tiles.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FaceCoord {
    pub face: u32,
    pub x: u32,
    pub y: u32,
}

/// A HEALPix grid at a fixed resolution, with the full neighbor table
/// materialized at construction time. Immutable afterwards, so it can be
/// shared freely across threads.
pub struct HealpixGrid {
    n_side: u32,
    n_pix: usize,
    neighbor_table: Vec<u32>,
    centers: OnceLock<Vec<(f64, f64)>>,
}

impl HealpixGrid {
    /// Builds the grid for a power-of-two `n_side`.
    pub fn new(n_side: u32) -> Result<Self> {
        if n_side == 0 || !n_side.is_power_of_two() {
            return Err(Error::InvalidResolution(n_side));
        }
        let n_pix = 12 * (n_side as usize) * (n_side as usize);
        let mut neighbor_table = vec![MISSING; n_pix * NEIGHBOR_SLOTS];
        for ipix in 0..n_pix {
            let row = compute_neighbors(n_side, ipix);
            neighbor_table[ipix * NEIGHBOR_SLOTS..(ipix + 1) * NEIGHBOR_SLOTS]
                .copy_from_slice(&row);
        }
        Ok(Self {
            n_side,
            n_pix,
            neighbor_table,
            centers: OnceLock::new(),
        })
    }

    pub fn n_side(&self) -> u32 {
        self.n_side
    }

    pub fn n_pix(&self) -> usize {
        self.n_pix
    }

    /// The 8 neighbor slots of `ipix` in SW,W,NW,N,NE,E,SE,S order.
    /// `None` marks a missing slot (the grid has 24 such slots in total).
    pub fn neighbors(&self, ipix: usize) -> Result<[Option<usize>; NEIGHBOR_SLOTS]> {
        self.check_index(ipix)?;
        let mut out = [None; NEIGHBOR_SLOTS];
        for (slot, out_slot) in out.iter_mut().enumerate() {
            *out_slot = self.neighbor(ipix, slot);
        }
        Ok(out)
    }

    /// Single-slot neighbor lookup without bounds checking on `ipix`.
    #[inline]
    pub fn neighbor(&self, ipix: usize, slot: usize) -> Option<usize> {
        let v = self.neighbor_table[ipix * NEIGHBOR_SLOTS + slot];
        if v == MISSING {
            None
        } else {
            Some(v as usize)
        }
    }

    /// Pixel-center angles (colatitude, longitude) in radians.
    pub fn pix2ang(&self, ipix: usize) -> Result<(f64, f64)> {
        self.check_index(ipix)?;
        Ok(self.centers()[ipix])
    }

    /// Index of the pixel containing the direction (theta, phi).
    /// phi may be any finite value; it is wrapped into [0, 2pi).
    pub fn ang2pix(&self, theta: f64, phi: f64) -> Result<usize> {
        if !theta.is_finite() || !phi.is_finite() || !(0.0..=PI).contains(&theta) {
            return Err(Error::InvalidInput(format!(
                "angles out of range: theta={theta}, phi={phi}"
            )));
        }
        Ok(ang2pix(self.n_side, theta, phi))
    }

    /// Cached table of pixel-center angles.
    pub fn centers(&self) -> &[(f64, f64)] {
        self.centers.get_or_init(|| {
            (0..self.n_pix)
                .map(|i| pix2ang(self.n_side, i))
                .collect()
        })
    }

    /// Writes the neighbor table as CSV rows `ipix,sw,w,nw,n,ne,e,se,s`
    /// with -1 for missing slots.
    pub fn dump_neighbors_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "ipix,sw,w,nw,n,ne,e,se,s")?;
        for ipix in 0..self.n_pix {
            write!(out, "{ipix}")?;
            for slot in 0..NEIGHBOR_SLOTS {
                match self.neighbor(ipix, slot) {
                    Some(j) => write!(out, ",{j}")?,
                    None => write!(out, ",-1")?,
                }
            }
            writeln!(out)?;
        }
        Ok(())
    }

    fn check_index(&self, ipix: usize) -> Result<()> {
        if ipix >= self.n_pix {
            Err(Error::IndexOutOfRange {
                index: ipix,
                len: self.n_pix,
            })
        } else {
            Ok(())
        }
    }
}

/// Grids keyed by resolution, built once and shared.
#[derive(Default)]
pub struct GridCache {
    inner: std::sync::Mutex<std::collections::HashMap<u32, std::sync::Arc<HealpixGrid>>>,
}

impl GridCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, n_side: u32) -> Result<std::sync::Arc<HealpixGrid>> {
        let mut map = self.inner.lock().expect("grid cache lock");
        if let Some(g) = map.get(&n_side) {
            return Ok(std::sync::Arc::clone(g));
        }
        let grid = std::sync::Arc::new(HealpixGrid::new(n_side)?);
        map.insert(n_side, std::sync::Arc::clone(&grid));
        Ok(grid)
    }
}

/// Parent of a pixel one resolution level up.
pub fn parent(ipix: usize) -> usize {
    ipix >> 2
}

/// The four children of a pixel one resolution level down.
pub fn children(ipix: usize) -> [usize; 4] {
    let base = ipix << 2;
    [base, base + 1, base + 2, base + 3]
}

/// Splits a nested index into its base tile and in-tile coordinates.
pub fn nest_to_face_xy(n_side: u32, ipix: usize) -> Result<FaceCoord> {
    let n_pix = 12 * (n_side as usize) * (n_side as usize);
    if ipix >= n_pix {
        return Err(Error::IndexOutOfRange {
            index: ipix,
            len: n_pix,
        });
    }
    let per_face = (n_side as usize) * (n_side as usize);
    let face = (ipix / per_face) as u32;
    let rem = (ipix % per_face) as u64;
    Ok(FaceCoord {
        face,
        x: compress_bits(rem),
        y: compress_bits(rem >> 1),
    })
}

/// Inverse of [`nest_to_face_xy`].
pub fn face_xy_to_nest(n_side: u32, fc: FaceCoord) -> Result<usize> {
    if fc.face >= 12 || fc.x >= n_side || fc.y >= n_side {
        return Err(Error::IndexOutOfRange {
            index: fc.face as usize,
            len: 12,
        });
    }
    let per_face = (n_side as usize) * (n_side as usize);
    Ok(fc.face as usize * per_face
        + (spread_bits(fc.x) | (spread_bits(fc.y) << 1)) as usize)
}

/// Interleaves the low 16 bits of `v` into even bit positions.
fn spread_bits(v: u32) -> u64 {
    let mut v = v as u64 & 0xffff;
    v = (v | (v << 8)) & 0x00ff_00ff;
    v = (v | (v << 4)) & 0x0f0f_0f0f;
    v = (v | (v << 2)) & 0x3333_3333;
    v = (v | (v << 1)) & 0x5555_5555;
    v
}

/// Extracts the even bit positions of `v` into a compact integer.
fn compress_bits(v: u64) -> u32 {
    let mut v = v & 0x5555_5555;
    v = (v | (v >> 1)) & 0x3333_3333;
    v = (v | (v >> 2)) & 0x0f0f_0f0f;
    v = (v | (v >> 4)) & 0x00ff_00ff;
    v = (v | (v >> 8)) & 0x0000_ffff;
    v as u32
}

fn fxy2nest(n_side: u32, face: u32, x: u32, y: u32) -> u32 {
    let per_face = n_side * n_side;
    face * per_face + (spread_bits(x) | (spread_bits(y) << 1)) as u32
}

// Base-tile cycling within a ring of four: tiles 0-3 form the north cap,
// 4-7 the equatorial belt, 8-11 the south cap.
fn iden(c: u32) -> u32 {
    c
}
fn next(c: u32) -> u32 {
    (c + 1) & 3
}
fn prev(c: u32) -> u32 {
    (c + 3) & 3
}
fn oppo(c: u32) -> u32 {
    (c + 2) & 3
}

/// Neighbor slots of one pixel. Steps (x, y) by the slot offset; when a
/// step leaves the base tile, the crossing direction selects the adjacent
/// tile and the coordinate frame change that comes with it.
fn compute_neighbors(n_side: u32, ipix: usize) -> [u32; NEIGHBOR_SLOTS] {
    let fc = nest_to_face_xy(n_side, ipix).expect("index in range");
    let ns = n_side as i64;
    let m = n_side - 1;
    let c = fc.face & 3;
    let ring = fc.face >> 2;
    let mut out = [MISSING; NEIGHBOR_SLOTS];
    for (slot, &(dx, dy)) in SLOT_OFFSETS.iter().enumerate() {
        let xx = fc.x as i64 + dx;
        let yy = fc.y as i64 + dy;
        let cross_x: i8 = if xx < 0 {
            -1
        } else if xx >= ns {
            1
        } else {
            0
        };
        let cross_y: i8 = if yy < 0 {
            -1
        } else if yy >= ns {
            1
        } else {
            0
        };
        if cross_x == 0 && cross_y == 0 {
            out[slot] = fxy2nest(n_side, fc.face, xx as u32, yy as u32);
            continue;
        }
        let xi = xx.rem_euclid(ns) as u32;
        let yi = yy.rem_euclid(ns) as u32;
        let target = match ring {
            // North polar cap tiles.
            0 => match (cross_x, cross_y) {
                (-1, -1) => Some((iden(c) + 8, m, m)),
                (0, -1) => Some((next(c) + 4, xi, m)),
                (-1, 0) => Some((iden(c) + 4, m, yi)),
                (1, 0) => Some((next(c), yi, m)),
                (0, 1) => Some((prev(c), m, xi)),
                (1, 1) => Some((oppo(c), m, m)),
                _ => None,
            },
            // Equatorial belt tiles.
            1 => match (cross_x, cross_y) {
                (0, -1) => Some((iden(c) + 8, xi, m)),
                (1, -1) => Some((next(c) + 4, 0, m)),
                (-1, 0) => Some((prev(c) + 8, m, yi)),
                (1, 0) => Some((iden(c), 0, yi)),
                (-1, 1) => Some((prev(c) + 4, m, 0)),
                (0, 1) => Some((prev(c), xi, 0)),
                _ => None,
            },
            // South polar cap tiles.
            _ => match (cross_x, cross_y) {
                (-1, -1) => Some((oppo(c) + 8, 0, 0)),
                (0, -1) => Some((next(c) + 8, 0, xi)),
                (-1, 0) => Some((prev(c) + 8, yi, 0)),
                (1, 0) => Some((next(c) + 4, 0, yi)),
                (0, 1) => Some((iden(c) + 4, xi, 0)),
                (1, 1) => Some((iden(c), 0, 0)),
                _ => None,
            },
        };
        if let Some((face, nx, ny)) = target {
            out[slot] = fxy2nest(n_side, face, nx, ny);
        }
    }
    out
}

// Ring index of the northernmost row of each base tile (in units of n_side),
// and the longitude offset of each tile (in units of pi/4).
const JRLL: [i64; 12] = [2, 2, 2, 2, 3, 3, 3, 3, 4, 4, 4, 4];
const JPLL: [i64; 12] = [1, 3, 5, 7, 0, 2, 4, 6, 1, 3, 5, 7];

/// Pixel-center angles without bounds checking.
fn pix2ang(n_side: u32, ipix: usize) -> (f64, f64) {
    let fc = nest_to_face_xy(n_side, ipix).expect("index in range");
    let ns = n_side as i64;
    let jr = JRLL[fc.face as usize] * ns - fc.x as i64 - fc.y as i64 - 1;
    let n_pix = 12.0 * (n_side as f64) * (n_side as f64);
    let fact2 = 4.0 / n_pix;
    let (nr, z) = if jr < ns {
        // North polar cap ring.
        let nr = jr;
        (nr, 1.0 - (nr * nr) as f64 * fact2)
    } else if jr > 3 * ns {
        // South polar cap ring.
        let nr = 4 * ns - jr;
        (nr, (nr * nr) as f64 * fact2 - 1.0)
    } else {
        // Equatorial ring: z spacing is uniform here.
        (ns, (2 * ns - jr) as f64 * 2.0 / (3.0 * n_side as f64))
    };
    let mut tmp = JPLL[fc.face as usize] * nr + fc.x as i64 - fc.y as i64;
    if tmp < 0 {
        tmp += 8 * nr;
    }
    let phi = FRAC_PI_4 * tmp as f64 / nr as f64;
    (z.acos(), phi)
}

/// Direction-to-pixel lookup without validation.
fn ang2pix(n_side: u32, theta: f64, phi: f64) -> usize {
    let z = theta.cos();
    let za = z.abs();
    let tt = (phi / (PI / 2.0)).rem_euclid(4.0);
    let ns = n_side as i64;
    let order = n_side.trailing_zeros();
    let pix = if za <= 2.0 / 3.0 {
        // Equatorial belt: locate between the ascending and descending
        // tile edge lines.
        let temp1 = n_side as f64 * (0.5 + tt);
        let temp2 = n_side as f64 * z * 0.75;
        let jp = (temp1 - temp2) as i64;
        let jm = (temp1 + temp2) as i64;
        let ifp = jp >> order;
        let ifm = jm >> order;
        let face = if ifp == ifm {
            (ifp | 4) as u32
        } else if ifp < ifm {
            ifp as u32
        } else {
            ifm as u32 + 8
        };
        let ix = (jm & (ns - 1)) as u32;
        let iy = (ns - (jp & (ns - 1)) - 1) as u32;
        fxy2nest(n_side, face, ix, iy)
    } else {
        // Polar caps.
        let ntt = (tt as i64).min(3);
        let tp = tt - ntt as f64;
        let tmp = n_side as f64 * (3.0 * (1.0 - za)).sqrt();
        let jp = ((tp * tmp) as i64).min(ns - 1);
        let jm = (((1.0 - tp) * tmp) as i64).min(ns - 1);
        if z >= 0.0 {
            fxy2nest(
                n_side,
                ntt as u32,
                (ns - jm - 1) as u32,
                (ns - jp - 1) as u32,
            )
        } else {
            fxy2nest(n_side, ntt as u32 + 8, jp as u32, jm as u32)
        }
    };
    pix as usize
}
