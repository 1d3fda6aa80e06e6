use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{AgentState, FlowMode, GridSpec, Scenario};
use crate::autograd::bilinear_taps;
use crate::{Error, Result};

/// Oriented BEV box with velocity in metres and m/s.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentBox {
    pub cx: f64,
    pub cy: f64,
    pub length: f64,
    pub width: f64,
    pub yaw: f64,
    pub vx: f64,
    pub vy: f64,
    pub yaw_rate: f64,
}

/// Rasterised ground truth of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct BevFrameGT {
    pub grid: GridSpec,
    pub frame: usize,
    /// Row-major `H x W`, 0 is background.
    pub instance_ids: Vec<u32>,
    /// `[2, H, W]` in cells: channel 0 is dx, channel 1 is dy. Zero where
    /// `flow_valid` is false.
    pub backward_flow: Vec<f32>,
    pub flow_valid: Vec<bool>,
    pub boxes: BTreeMap<u32, AgentBox>,
    pub classes: BTreeMap<u32, u32>,
}

impl BevFrameGT {
    pub fn occupancy(&self) -> Vec<bool> {
        self.instance_ids.iter().map(|&i| i != 0).collect()
    }

    pub fn id_at(&self, col: usize, row: usize) -> u32 {
        self.instance_ids[row * self.grid.width + col]
    }

    pub fn occupied_count(&self) -> usize {
        self.instance_ids.iter().filter(|&&i| i != 0).count()
    }
}

/// True when the metric point lies in the closed oriented rectangle.
fn inside(s: &AgentState, length: f64, width: f64, x: f64, y: f64) -> bool {
    let (dx, dy) = (x - s.x, y - s.y);
    let (sn, cs) = s.yaw.sin_cos();
    let lx = dx * cs + dy * sn;
    let ly = -dx * sn + dy * cs;
    lx.abs() <= length / 2.0 && ly.abs() <= width / 2.0
}

fn paint_ids(scn: &Scenario, t: usize) -> Vec<u32> {
    let g = scn.grid;
    let mut ids = vec![0u32; g.cells()];
    for a in &scn.agents {
        let Some(s) = a.state(t) else { continue };
        // circumscribed circle bounds the rectangle
        let r = 0.5 * a.length.hypot(a.width);
        let (x0, y0) = g.to_cell(s.x - r, s.y - r);
        let (x1, y1) = g.to_cell(s.x + r, s.y + r);
        let lo = |v: f64| v.floor().max(0.0) as usize;
        let (c0, r0) = (lo(x0), lo(y0));
        let c1 = (x1.ceil().min(g.width as f64 - 1.0)).max(-1.0);
        let r1 = (y1.ceil().min(g.height as f64 - 1.0)).max(-1.0);
        if c1 < 0.0 || r1 < 0.0 {
            continue;
        }
        for row in r0..=r1 as usize {
            for col in c0..=c1 as usize {
                let (x, y) = g.cell_center(col, row);
                if inside(s, a.length, a.width, x, y) {
                    let cell = &mut ids[row * g.width + col];
                    // smaller id wins overlaps
                    if *cell == 0 || a.agent_id < *cell {
                        *cell = a.agent_id;
                    }
                }
            }
        }
    }
    ids
}

fn frame_without_flow(scn: &Scenario, t: usize) -> BevFrameGT {
    let mut boxes = BTreeMap::new();
    let mut classes = BTreeMap::new();
    for a in &scn.agents {
        if let Some(s) = a.state(t) {
            boxes.insert(
                a.agent_id,
                AgentBox {
                    cx: s.x,
                    cy: s.y,
                    length: a.length,
                    width: a.width,
                    yaw: s.yaw,
                    vx: s.speed * s.yaw.cos(),
                    vy: s.speed * s.yaw.sin(),
                    yaw_rate: s.yaw_rate,
                },
            );
            classes.insert(a.agent_id, a.class);
        }
    }
    let cells = scn.grid.cells();
    BevFrameGT {
        grid: scn.grid,
        frame: t,
        instance_ids: paint_ids(scn, t),
        backward_flow: vec![0.0; 2 * cells],
        flow_valid: vec![false; cells],
        boxes,
        classes,
    }
}

/// Rasterises frame `t`: a cell belongs to an agent iff its centre lies in
/// the agent's rectangle (smaller id wins). Backward flow is filled for
/// `t >= 1`. Boxes list every agent alive at `t`, including those outside
/// the grid.
pub fn rasterize_frame(scn: &Scenario, t: usize) -> Result<BevFrameGT> {
    if t >= scn.num_frames() {
        return Err(Error::OutOfRange {
            index: t,
            len: scn.num_frames(),
        });
    }
    let mut frame = frame_without_flow(scn, t);
    if t >= 1 {
        let prev = frame_without_flow(scn, t - 1);
        let (flow, valid) = compute_backward_flow(&frame, &prev, scn, t)?;
        frame.backward_flow = flow;
        frame.flow_valid = valid;
    }
    Ok(frame)
}

/// Backward flow in cells for frame `t`: for every cell of an agent that
/// also exists at `t - 1`, the displacement from the cell centre to the
/// same material point one frame earlier.
pub fn compute_backward_flow(
    frame_t: &BevFrameGT,
    frame_prev: &BevFrameGT,
    scn: &Scenario,
    t: usize,
) -> Result<(Vec<f32>, Vec<bool>)> {
    if frame_t.grid != frame_prev.grid || frame_t.grid != scn.grid {
        return Err(Error::Shape(format!(
            "grid mismatch: {:?} vs {:?}",
            frame_t.grid, frame_prev.grid
        )));
    }
    if t == 0 || t >= scn.num_frames() {
        return Err(Error::OutOfRange {
            index: t,
            len: scn.num_frames(),
        });
    }
    let g = scn.grid;
    let hw = g.cells();
    let mut flow = vec![0.0f32; 2 * hw];
    let mut valid = vec![false; hw];
    let by_id: BTreeMap<u32, _> = scn.agents.iter().map(|a| (a.agent_id, a)).collect();
    for row in 0..g.height {
        for col in 0..g.width {
            let n = row * g.width + col;
            let id = frame_t.instance_ids[n];
            if id == 0 {
                continue;
            }
            let a = by_id[&id];
            let (Some(now), Some(before)) = (a.state(t), a.state(t - 1)) else {
                continue;
            };
            let (x, y) = g.cell_center(col, row);
            let (px, py) = match scn.flow_mode {
                FlowMode::Translation => (x + before.x - now.x, y + before.y - now.y),
                FlowMode::Rigid => {
                    let (dx, dy) = (x - now.x, y - now.y);
                    let (s0, c0) = now.yaw.sin_cos();
                    let (lx, ly) = (dx * c0 + dy * s0, -dx * s0 + dy * c0);
                    let (s1, c1) = before.yaw.sin_cos();
                    (before.x + lx * c1 - ly * s1, before.y + lx * s1 + ly * c1)
                }
            };
            flow[n] = ((px - x) / g.resolution) as f32;
            flow[hw + n] = ((py - y) / g.resolution) as f32;
            valid[n] = true;
        }
    }
    Ok((flow, valid))
}

/// Input channels per history frame: occupancy, vx, vy.
pub const RASTER_CHANNELS: usize = 3;

/// `[(t_in + 1) * 3, H, W]` history raster for frames `0..=t_in`.
/// Velocities are in cells per frame on occupied cells, zero elsewhere.
pub fn input_raster(scn: &Scenario) -> Vec<f32> {
    let g = scn.grid;
    let hw = g.cells();
    let scale = scn.dt / g.resolution;
    let by_id: BTreeMap<u32, _> = scn.agents.iter().map(|a| (a.agent_id, a)).collect();
    let mut out = vec![0.0f32; (scn.t_in + 1) * RASTER_CHANNELS * hw];
    for t in 0..=scn.t_in {
        let ids = paint_ids(scn, t);
        let base = t * RASTER_CHANNELS * hw;
        for (n, &id) in ids.iter().enumerate() {
            if id == 0 {
                continue;
            }
            let s = by_id[&id].state(t).expect("painted agents are alive");
            out[base + n] = 1.0;
            out[base + hw + n] = (s.speed * s.yaw.cos() * scale) as f32;
            out[base + 2 * hw + n] = (s.speed * s.yaw.sin() * scale) as f32;
        }
    }
    out
}

/// Flow-warp check: for each flow-valid cell at `t`, bilinearly samples the
/// occupancy of the same agent at `t - 1` at `p + flow(p)`. A cell is
/// reproduced when the gathered value is positive, i.e. the warped point
/// touches at least one cell the agent occupied. Returns
/// `(reproduced, valid)`.
pub fn warp_consistency(cur: &BevFrameGT, prev: &BevFrameGT) -> (usize, usize) {
    let g = cur.grid;
    let hw = g.cells();
    let (mut ok, mut total) = (0, 0);
    for row in 0..g.height {
        for col in 0..g.width {
            let n = row * g.width + col;
            if !cur.flow_valid[n] {
                continue;
            }
            total += 1;
            let id = cur.instance_ids[n];
            let x = col as f64 + cur.backward_flow[n] as f64;
            let y = row as f64 + cur.backward_flow[hw + n] as f64;
            let v: f64 = bilinear_taps(x, y, g.height, g.width)
                .iter()
                .filter_map(|tap| tap.cell.map(|c| (c, tap.weight)))
                .filter(|&(c, _)| prev.instance_ids[c] == id)
                .map(|(_, w)| w)
                .sum();
            if v > 0.0 {
                ok += 1;
            }
        }
    }
    (ok, total)
}

#[cfg(test)]
mod tests {
    use super::super::{generate_scenario, AgentTrack, ScenarioConfig};
    use super::*;

    fn one_agent(grid: GridSpec, track: Vec<AgentState>, length: f64, width: f64) -> Scenario {
        let mut cfg = ScenarioConfig {
            grid,
            ..Default::default()
        };
        cfg.t_in = 1;
        cfg.t_out = track.len() - 2;
        let mut s = Scenario::empty(0, &cfg);
        s.agents.push(AgentTrack {
            agent_id: 1,
            class: 0,
            length,
            width,
            first_frame: 0,
            states: track,
        });
        s
    }

    fn st(x: f64, y: f64, yaw: f64) -> AgentState {
        AgentState {
            x,
            y,
            yaw,
            speed: 0.0,
            yaw_rate: 0.0,
        }
    }

    /// Crossing-number point-in-polygon test, independent of the production
    /// local-frame check.
    fn pip(poly: &[(f64, f64)], x: f64, y: f64) -> bool {
        let mut inside = false;
        let mut j = poly.len() - 1;
        for i in 0..poly.len() {
            let (xi, yi) = poly[i];
            let (xj, yj) = poly[j];
            if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
                inside = !inside;
            }
            j = i;
        }
        inside
    }

    #[test]
    fn axis_aligned_box_covers_eight_cells() {
        let g = GridSpec::new(20, 20, 0.5).unwrap();
        let s = one_agent(g, vec![st(0.0, 0.0, 0.0); 3], 2.0, 1.0);
        let f = rasterize_frame(&s, 0).unwrap();
        // centres at +-0.25, +-0.75 along x and +-0.25 along y
        assert_eq!(f.occupied_count(), 8);
        assert_eq!(f.occupancy(), f.instance_ids.iter().map(|&i| i != 0).collect::<Vec<_>>());
    }

    #[test]
    fn rotated_boxes_match_polygon_oracle() {
        let g = GridSpec::new(24, 24, 0.5).unwrap();
        for (k, yaw) in [0.3, std::f64::consts::FRAC_PI_4, 1.1, 2.5, -0.8].iter().enumerate() {
            let (cx, cy) = (0.13 * k as f64 - 0.2, 0.37 - 0.11 * k as f64);
            let (l, w) = (4.3, 1.9);
            let s = one_agent(g, vec![st(cx, cy, *yaw); 3], l, w);
            let f = rasterize_frame(&s, 0).unwrap();
            let (sn, cs) = yaw.sin_cos();
            let poly: Vec<(f64, f64)> = [(1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0)]
                .iter()
                .map(|(a, b)| {
                    let (lx, ly) = (a * l / 2.0, b * w / 2.0);
                    (cx + lx * cs - ly * sn, cy + lx * sn + ly * cs)
                })
                .collect();
            let mut count = 0;
            for row in 0..g.height {
                for col in 0..g.width {
                    let (x, y) = g.cell_center(col, row);
                    let want = pip(&poly, x, y);
                    assert_eq!(f.id_at(col, row) != 0, want, "yaw {yaw} cell ({col},{row})");
                    count += want as usize;
                }
            }
            assert!(count > 20);
        }
    }

    #[test]
    fn empty_scenario_is_background() {
        let mut cfg = ScenarioConfig::default();
        cfg.agents = [0, 0];
        let s = generate_scenario(3, &cfg).unwrap();
        for t in 0..s.num_frames() {
            let f = rasterize_frame(&s, t).unwrap();
            assert_eq!(f.occupied_count(), 0);
            assert!(f.flow_valid.iter().all(|v| !v));
        }
    }

    #[test]
    fn smaller_id_wins_overlap() {
        let g = GridSpec::new(16, 16, 0.5).unwrap();
        let mut s = one_agent(g, vec![st(0.0, 0.0, 0.0); 3], 2.0, 1.0);
        let mut other = s.agents[0].clone();
        other.agent_id = 2;
        other.states = vec![st(0.5, 0.0, 0.0); 3];
        s.agents.insert(0, other);
        let f = rasterize_frame(&s, 0).unwrap();
        let (c, r) = (8, 8); // centre (0.25, 0.25), inside both
        assert_eq!(f.id_at(c, r), 1);
        assert!(f.instance_ids.contains(&2));
    }

    #[test]
    fn translating_agent_has_constant_flow() {
        let g = GridSpec::new(32, 32, 0.5).unwrap();
        // +1 m per frame = +2 cells per frame
        let track = (0..3).map(|f| st(-3.0 + f as f64, 0.2, 0.0)).collect();
        let s = one_agent(g, track, 2.0, 1.0);
        let f = rasterize_frame(&s, 2).unwrap();
        let hw = g.cells();
        let mut n = 0;
        for i in 0..hw {
            if f.flow_valid[i] {
                assert_eq!((f.backward_flow[i], f.backward_flow[hw + i]), (-2.0, 0.0));
                n += 1;
            } else {
                assert_eq!((f.backward_flow[i], f.backward_flow[hw + i]), (0.0, 0.0));
            }
        }
        assert_eq!(n, f.occupied_count());
    }

    #[test]
    fn static_and_newborn_agents() {
        let g = GridSpec::new(16, 16, 0.5).unwrap();
        let s = one_agent(g, vec![st(0.0, 0.0, 0.4); 3], 2.0, 1.0);
        let f = rasterize_frame(&s, 1).unwrap();
        assert!(f.occupied_count() > 0);
        for i in 0..g.cells() {
            assert_eq!(f.flow_valid[i], f.instance_ids[i] != 0);
            assert_eq!(f.backward_flow[i], 0.0);
        }
        let mut born = s.clone();
        born.agents[0].first_frame = 1;
        born.agents[0].states.truncate(2);
        let f = rasterize_frame(&born, 1).unwrap();
        assert!(f.occupied_count() > 0);
        assert!(f.flow_valid.iter().all(|v| !v));
    }

    #[test]
    fn rotating_flow_maps_to_material_point() {
        let g = GridSpec::new(32, 32, 0.5).unwrap();
        let track = vec![st(0.0, 0.0, 0.0), st(1.0, 0.5, 0.3), st(2.0, 1.0, 0.6)];
        let s = one_agent(g, track, 4.0, 2.0);
        let f = rasterize_frame(&s, 2).unwrap();
        let hw = g.cells();
        for row in 0..g.height {
            for col in 0..g.width {
                let n = row * g.width + col;
                if !f.flow_valid[n] {
                    continue;
                }
                let (x, y) = g.cell_center(col, row);
                let px = x + f.backward_flow[n] as f64 * 0.5;
                let py = y + f.backward_flow[hw + n] as f64 * 0.5;
                // same offset from the centre in each agent's own frame
                let loc = |s: &AgentState, x: f64, y: f64| {
                    let (sn, cs) = s.yaw.sin_cos();
                    let (dx, dy) = (x - s.x, y - s.y);
                    (dx * cs + dy * sn, -dx * sn + dy * cs)
                };
                let a = loc(&s.agents[0].states[2], x, y);
                let b = loc(&s.agents[0].states[1], px, py);
                assert!((a.0 - b.0).abs() < 1e-5 && (a.1 - b.1).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn out_of_range_frame_and_grid_mismatch() {
        let s = generate_scenario(1, &ScenarioConfig::default()).unwrap();
        assert!(matches!(
            rasterize_frame(&s, s.num_frames()),
            Err(Error::OutOfRange { .. })
        ));
        let a = rasterize_frame(&s, 1).unwrap();
        let mut b = rasterize_frame(&s, 0).unwrap();
        b.grid.width += 1;
        assert!(compute_backward_flow(&a, &b, &s, 1).is_err());
    }

    #[test]
    fn input_raster_marks_history() {
        let g = GridSpec::new(16, 16, 0.5).unwrap();
        let mut s = one_agent(g, vec![st(0.0, 0.0, 0.0); 3], 2.0, 1.0);
        s.agents[0].states[0].speed = 2.0;
        let r = input_raster(&s);
        let hw = g.cells();
        assert_eq!(r.len(), (s.t_in + 1) * 3 * hw);
        let occ: f32 = r[..hw].iter().sum();
        assert_eq!(occ, 8.0);
        // 2 m/s * 0.5 s / 0.5 m = 2 cells per frame
        assert!(r[hw..2 * hw].iter().all(|&v| v == 0.0 || v == 2.0));
        assert!(r[2 * hw..3 * hw].iter().all(|&v| v == 0.0));
    }
}
