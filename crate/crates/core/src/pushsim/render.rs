use super::{in_t, EnvParams, SimState, AGENT_RADIUS};
use crate::trajkit::{IMG_C, IMG_H, IMG_W};

const SUPERSAMPLE: usize = 2;
const BACKGROUND: [f32; 3] = [1.0, 1.0, 1.0];

fn local(p: [f64; 2], origin: [f64; 2], angle: f64) -> [f64; 2] {
    let (s, c) = angle.sin_cos();
    let d = [p[0] - origin[0], p[1] - origin[1]];
    [c * d[0] + s * d[1], -s * d[0] + c * d[1]]
}

/// Color of the topmost shape covering world point `p`.
pub(crate) fn shade(s: &SimState, params: &EnvParams, p: [f64; 2]) -> [f32; 3] {
    let da = [p[0] - s.agent_pos[0], p[1] - s.agent_pos[1]];
    if da[0] * da[0] + da[1] * da[1] <= AGENT_RADIUS * AGENT_RADIUS {
        params.agent_color
    } else if in_t(local(p, s.block_pos, s.block_angle)) {
        params.block_color
    } else if in_t(local(p, s.goal_pos, s.goal_angle)) {
        params.goal_color
    } else {
        BACKGROUND
    }
}

/// World coordinates of subsample `(sy, sx)` of pixel `(row, col)`; row 0 is the top edge (y = 1).
pub(crate) fn sample_point(row: usize, col: usize, sy: usize, sx: usize) -> [f64; 2] {
    let n = SUPERSAMPLE as f64;
    let x = (col as f64 + (sx as f64 + 0.5) / n) / IMG_W as f64;
    let y = 1.0 - (row as f64 + (sy as f64 + 0.5) / n) / IMG_H as f64;
    [x, y]
}

/// Rasterizes the scene into a row-major, channel-last 32x32 RGB image.
pub fn render(s: &SimState, params: &EnvParams) -> Vec<f32> {
    let mut img = vec![0.0f32; IMG_H * IMG_W * IMG_C];
    let w = 1.0 / (SUPERSAMPLE * SUPERSAMPLE) as f32;
    for row in 0..IMG_H {
        for col in 0..IMG_W {
            let px = &mut img[(row * IMG_W + col) * IMG_C..][..IMG_C];
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let c = shade(s, params, sample_point(row, col, sy, sx));
                    for (v, cv) in px.iter_mut().zip(c) {
                        *v += w * cv;
                    }
                }
            }
            for v in px.iter_mut() {
                *v = v.clamp(0.0, 1.0);
            }
        }
    }
    img
}

/// Centroid, in world coordinates, of the pixels whose color is within
/// `tol` of `color` in every channel; `None` if fewer than `min_pixels` match.
pub fn locate_color(image: &[f32], color: [f32; 3], tol: f32, min_pixels: usize) -> Option<[f64; 2]> {
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
    for (i, px) in image.chunks_exact(IMG_C).enumerate() {
        if px.iter().zip(color).all(|(&v, c)| (v - c).abs() <= tol) {
            sx += ((i % IMG_W) as f64 + 0.5) / IMG_W as f64;
            sy += 1.0 - ((i / IMG_W) as f64 + 0.5) / IMG_H as f64;
            n += 1;
        }
    }
    (n >= min_pixels.max(1)).then(|| [sx / n as f64, sy / n as f64])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene() -> SimState {
        SimState {
            agent_pos: [0.2, 0.8],
            block_pos: [0.65, 0.35],
            block_angle: 0.7,
            block_vel: [0.0, 0.0],
            block_omega: 0.0,
            goal_pos: [0.5, 0.5],
            goal_angle: std::f64::consts::FRAC_PI_4,
            step: 0,
        }
    }

    #[test]
    fn values_in_unit_range_and_deterministic() {
        let p = EnvParams::default();
        let a = render(&scene(), &p);
        assert_eq!(a.len(), 3072);
        assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
        let b = render(&scene(), &p);
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn off_canvas_scene_shows_only_agent() {
        let mut s = scene();
        s.block_pos = [5.0, 5.0];
        s.goal_pos = [-5.0, 5.0];
        let p = EnvParams::default();
        let img = render(&s, &p);
        for row in 0..IMG_H {
            for col in 0..IMG_W {
                let near_agent = (0..2).any(|sy| {
                    (0..2).any(|sx| {
                        let q = sample_point(row, col, sy, sx);
                        (q[0] - 0.2).hypot(q[1] - 0.8) <= AGENT_RADIUS
                    })
                });
                let px = &img[(row * IMG_W + col) * 3..][..3];
                if !near_agent {
                    assert_eq!(px, &[1.0, 1.0, 1.0]);
                }
            }
        }
        assert!(img.iter().any(|&v| v < 1.0));
    }

    #[test]
    fn recolor_diff_confined_to_block_pixels() {
        let s = scene();
        let p = EnvParams::default();
        let a = render(&s, &p);
        for color in [[1.0, 0.5, 0.0], [0.0, 1.0, 0.0]] {
            let q = EnvParams { block_color: color, ..p };
            let b = render(&s, &q);
            let mut changed = 0;
            for row in 0..IMG_H {
                for col in 0..IMG_W {
                    // oracle: any subsample on the block and off the agent
                    let visible_block = (0..2).any(|sy| {
                        (0..2).any(|sx| {
                            let w = sample_point(row, col, sy, sx);
                            let (sn, cs) = s.block_angle.sin_cos();
                            let d = [w[0] - s.block_pos[0], w[1] - s.block_pos[1]];
                            let l = [cs * d[0] + sn * d[1], -sn * d[0] + cs * d[1]];
                            let on_agent = (w[0] - s.agent_pos[0]).hypot(w[1] - s.agent_pos[1]) <= AGENT_RADIUS;
                            in_t(l) && !on_agent
                        })
                    });
                    let i = (row * IMG_W + col) * 3;
                    if a[i..i + 3] != b[i..i + 3] {
                        changed += 1;
                        assert!(visible_block, "pixel ({row},{col}) changed off the block");
                    }
                }
            }
            assert!(changed > 10);
        }
    }
}
