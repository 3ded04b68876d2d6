//! Brute-force reference implementations used to check the simulator.

use std::collections::BTreeMap;

/// One step for the time-stepped pipeline oracle.
#[derive(Debug, Clone)]
pub struct OracleStep {
    /// Service time in integer ticks.
    pub service: u64,
    pub workers: usize,
    pub feed_forward: bool,
}

/// Advances a clock one tick at a time, completing and starting fragments at
/// each tick. Returns the finish tick of every (step, fragment).
pub fn pipeline_finish_ticks(steps: &[OracleStep], edges: &[(usize, usize)], fragments: u32) -> Vec<Vec<u64>> {
    let n = steps.len();
    let m = fragments as usize;
    let preds: Vec<Vec<usize>> = (0..n).map(|s| edges.iter().filter(|e| e.1 == s).map(|e| e.0).collect()).collect();
    let mut done: Vec<Vec<Option<u64>>> = vec![vec![None; m]; n];
    let mut started: Vec<Vec<bool>> = vec![vec![false; m]; n];
    // Per step: worker -> (fragment, finish tick).
    let mut busy: Vec<BTreeMap<usize, (usize, u64)>> = vec![BTreeMap::new(); n];
    let mut t = 0u64;
    loop {
        for s in 0..n {
            let finished: Vec<usize> = busy[s].iter().filter(|(_, &(_, end))| end == t).map(|(&w, _)| w).collect();
            for w in finished {
                let (f, _) = busy[s].remove(&w).unwrap();
                done[s][f] = Some(t);
            }
        }
        if done.iter().all(|row| row.iter().all(Option::is_some)) {
            break;
        }
        for s in 0..n {
            let all_preds_done = preds[s].iter().all(|&p| done[p].iter().all(Option::is_some));
            for f in 0..m {
                if busy[s].len() >= steps[s].workers {
                    break;
                }
                if started[s][f] {
                    continue;
                }
                let ready = if steps[s].feed_forward {
                    preds[s].iter().all(|&p| done[p][f].is_some())
                } else {
                    all_preds_done
                };
                if ready {
                    let w = (0..steps[s].workers).find(|w| !busy[s].contains_key(w)).unwrap();
                    busy[s].insert(w, (f, t + steps[s].service));
                    started[s][f] = true;
                }
            }
        }
        t += 1;
        assert!(t < 10_000_000, "oracle did not terminate");
    }
    done.into_iter().map(|row| row.into_iter().map(Option::unwrap).collect()).collect()
}

pub fn pipeline_makespan_ticks(steps: &[OracleStep], edges: &[(usize, usize)], fragments: u32) -> u64 {
    pipeline_finish_ticks(steps, edges, fragments)
        .iter()
        .flatten()
        .copied()
        .max()
        .unwrap_or(0)
}

/// Exhaustive check: can `replicas` copies of `demand` be assigned to the
/// live nodes without exceeding any node's free capacity? Tries every
/// replica-to-node mapping.
pub fn placement_feasible(demand: (u64, u64), replicas: u32, free: &[(u64, u64)], alive: &[bool]) -> bool {
    let n = free.len();
    if replicas == 0 {
        return true;
    }
    if n == 0 {
        return false;
    }
    let total = (n as u64).pow(replicas);
    'outer: for code in 0..total {
        let mut used = vec![(0u64, 0u64); n];
        let mut c = code;
        for _ in 0..replicas {
            let node = (c % n as u64) as usize;
            c /= n as u64;
            if !alive[node] {
                continue 'outer;
            }
            used[node].0 += demand.0;
            used[node].1 += demand.1;
        }
        if used.iter().zip(free).all(|(u, f)| u.0 <= f.0 && u.1 <= f.1) {
            return true;
        }
    }
    false
}
