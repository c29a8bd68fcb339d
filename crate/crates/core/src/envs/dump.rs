//! Trajectory CSV dumps: one row per transition.

use std::io::Write;

use super::{Trajectory, STATE_DIM};
use crate::error::Result;

pub fn header() -> Vec<String> {
    let mut h = vec!["task_id".to_string(), "step".to_string()];
    h.extend((0..STATE_DIM).map(|i| format!("s{i}")));
    h.push("a0".into());
    h.push("reward".into());
    h.push("done".into());
    h
}

pub fn write_trajectories<W: Write>(out: W, trajectories: &[Trajectory]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header())?;
    for traj in trajectories {
        for (step, t) in traj.transitions.iter().enumerate() {
            let mut row = vec![t.task.to_string(), step.to_string()];
            row.extend(t.state.iter().map(|v| v.to_string()));
            row.push(t.action.value().to_string());
            row.push(t.reward.to_string());
            row.push(u8::from(t.done).to_string());
            w.write_record(&row)?;
        }
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}
