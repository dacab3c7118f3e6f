//! Scene (de)serialization: per-agent clouds in the binary tensor format
//! plus a structured-text sidecar carrying poses, boxes, seed and metadata.

use std::path::{Path, PathBuf};

use super::{AgentFrame, BevBox, PointCloud, Pose, Scene, SceneMeta};
use crate::io::{read_tensor, read_text, write_tensor, write_text, DumpPrecision};
use crate::{Error, Result};

fn bad(path: &Path, msg: impl Into<String>) -> Error {
    Error::TensorFormat { path: path.to_path_buf(), msg: msg.into() }
}

pub fn scene_sidecar_path(dir: &Path, idx: usize) -> PathBuf {
    dir.join(format!("scene_{idx:06}.txt"))
}

fn cloud_file(idx: usize, agent: usize) -> String {
    format!("scene_{idx:06}_a{agent}.cdt")
}

/// Writes one scene: clouds as `P x 5` tensors, everything else as text.
pub fn save_scene(dir: &Path, idx: usize, scene: &Scene) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut side = String::new();
    side.push_str("coopdiff-scene v1\n");
    side.push_str(&format!("seed {}\n", scene.seed));
    side.push_str(&format!("requested_boxes {}\n", scene.meta.requested_boxes));
    for (ai, agent) in scene.agents.iter().enumerate() {
        let file = cloud_file(idx, ai);
        write_tensor(&dir.join(&file), &agent.cloud.to_tensor(), DumpPrecision::F64)?;
        side.push_str(&format!(
            "agent {} {} {} {} {}\n",
            agent.pose.x, agent.pose.y, agent.pose.yaw, agent.cloud.n_beams, file
        ));
    }
    for b in &scene.gt_boxes {
        side.push_str(&format!("box {} {} {} {} {}\n", b.cx, b.cy, b.w, b.l, b.yaw));
    }
    for (ai, counts) in scene.meta.box_points.iter().enumerate() {
        let list: Vec<String> = counts.iter().map(|c| c.to_string()).collect();
        side.push_str(&format!("box_points {} {}\n", ai, list.join(" ")));
    }
    write_text(&scene_sidecar_path(dir, idx), &side)
}

pub fn load_scene(dir: &Path, idx: usize) -> Result<Scene> {
    let side_path = scene_sidecar_path(dir, idx);
    let text = read_text(&side_path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some("coopdiff-scene v1") => {}
        other => return Err(bad(&side_path, format!("bad header {:?}", other))),
    }
    let mut seed = 0u64;
    let mut requested_boxes = 0usize;
    let mut agents: Vec<AgentFrame> = Vec::new();
    let mut gt_boxes: Vec<BevBox> = Vec::new();
    let mut box_points: Vec<Vec<usize>> = Vec::new();
    for line in lines {
        let mut it = line.split_whitespace();
        let Some(tag) = it.next() else { continue };
        let rest: Vec<&str> = it.collect();
        let parse = |s: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|e| bad(&side_path, format!("bad float '{s}': {e}")))
        };
        match tag {
            "seed" => {
                seed = rest[0]
                    .parse()
                    .map_err(|e| bad(&side_path, format!("bad seed: {e}")))?;
            }
            "requested_boxes" => {
                requested_boxes = rest[0]
                    .parse()
                    .map_err(|e| bad(&side_path, format!("bad count: {e}")))?;
            }
            "agent" => {
                if rest.len() != 5 {
                    return Err(bad(&side_path, format!("agent line needs 5 fields: {line}")));
                }
                let pose = Pose::new(parse(rest[0])?, parse(rest[1])?, parse(rest[2])?);
                let n_beams: usize = rest[3]
                    .parse()
                    .map_err(|e| bad(&side_path, format!("bad n_beams: {e}")))?;
                let tensor = read_tensor::<f64>(&dir.join(rest[4]))?;
                let cloud = PointCloud::from_tensor(&tensor, n_beams)?;
                agents.push(AgentFrame { pose, cloud });
            }
            "box" => {
                if rest.len() != 5 {
                    return Err(bad(&side_path, format!("box line needs 5 fields: {line}")));
                }
                gt_boxes.push(BevBox::gt(
                    parse(rest[0])?,
                    parse(rest[1])?,
                    parse(rest[2])?,
                    parse(rest[3])?,
                    parse(rest[4])?,
                ));
            }
            "box_points" => {
                let counts: Vec<usize> = rest[1..]
                    .iter()
                    .map(|s| s.parse().map_err(|e| bad(&side_path, format!("bad count: {e}"))))
                    .collect::<Result<_>>()?;
                box_points.push(counts);
            }
            other => return Err(bad(&side_path, format!("unknown record '{other}'"))),
        }
    }
    if agents.is_empty() {
        return Err(bad(&side_path, "scene has no agents"));
    }
    Ok(Scene { agents, gt_boxes, seed, meta: SceneMeta { requested_boxes, box_points } })
}

/// Number of scenes present in a split directory.
pub fn count_scenes(dir: &Path) -> usize {
    let mut n = 0;
    while scene_sidecar_path(dir, n).exists() {
        n += 1;
    }
    n
}

/// Loads a whole split in index order.
pub fn load_split(dir: &Path) -> Result<Vec<Scene>> {
    (0..count_scenes(dir)).map(|i| load_scene(dir, i)).collect()
}
