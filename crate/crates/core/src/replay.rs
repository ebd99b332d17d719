//! Per-task replay of successful trajectories.
//!
//! Each task keeps a bounded FIFO of its most recent fresh successes. When a
//! freshly collected group fails the task in every member, one uniformly
//! chosen member is overwritten by a uniformly chosen cached success, so the
//! group regains reward variance.

use std::collections::{BTreeMap, VecDeque};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{get_trajectory, put_trajectory, Reader, Writer};
use crate::error::{Error, Result};
use crate::grpo::{GroupPhase, RolloutGroup};
use crate::trajectory::{Origin, Trajectory};

pub const DEFAULT_CAPACITY_PER_TASK: usize = 4;

const MAGIC: &[u8; 8] = b"ARPORPL1";

#[derive(Clone, Debug, PartialEq)]
pub struct ReplayEntry {
    /// Global insertion sequence number.
    pub inserted_at: u64,
    pub trajectory: Trajectory,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InsertOutcome {
    Stored,
    StoredWithEviction,
    /// Failed or replayed trajectories are not cached.
    Ignored,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Injection {
    pub task_id: u32,
    pub slot: usize,
    /// Insertion sequence number of the injected entry.
    pub source: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReplayBuffer {
    capacity_per_task: usize,
    queues: BTreeMap<u32, VecDeque<ReplayEntry>>,
    pub insertion_count: u64,
    pub eviction_count: u64,
    pub injection_count: u64,
}

impl ReplayBuffer {
    pub fn new(capacity_per_task: usize) -> Self {
        ReplayBuffer {
            capacity_per_task,
            queues: BTreeMap::new(),
            insertion_count: 0,
            eviction_count: 0,
            injection_count: 0,
        }
    }

    pub fn capacity_per_task(&self) -> usize {
        self.capacity_per_task
    }

    pub fn len(&self, task_id: u32) -> usize {
        self.queues.get(&task_id).map_or(0, VecDeque::len)
    }

    pub fn total_len(&self) -> usize {
        self.queues.values().map(VecDeque::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total_len() == 0
    }

    pub fn entries(&self, task_id: u32) -> impl Iterator<Item = &ReplayEntry> {
        self.queues.get(&task_id).into_iter().flatten()
    }

    pub fn task_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.queues.keys().copied()
    }

    /// Caches a fresh success, evicting the oldest entry of a full queue.
    pub fn insert(&mut self, trajectory: &Trajectory) -> InsertOutcome {
        if !trajectory.is_success() || trajectory.origin != Origin::Fresh || self.capacity_per_task == 0 {
            return InsertOutcome::Ignored;
        }
        let queue = self.queues.entry(trajectory.task_id).or_default();
        let mut outcome = InsertOutcome::Stored;
        while queue.len() >= self.capacity_per_task {
            queue.pop_front();
            self.eviction_count += 1;
            outcome = InsertOutcome::StoredWithEviction;
        }
        queue.push_back(ReplayEntry {
            inserted_at: self.insertion_count,
            trajectory: trajectory.clone(),
        });
        self.insertion_count += 1;
        outcome
    }

    /// Replaces one member of an all-fail group with a cached success for the
    /// same task. Groups with any success, or tasks with nothing cached, pass
    /// through untouched.
    pub fn maybe_inject(
        &mut self,
        mut group: RolloutGroup,
        rng: &mut impl Rng,
    ) -> Result<(RolloutGroup, Option<Injection>)> {
        group.require_phase(GroupPhase::Collected)?;
        if group.injected_slot.is_some() || !group.all_failed() {
            return Ok((group, None));
        }
        let Some(queue) = self.queues.get(&group.task_id).filter(|q| !q.is_empty()) else {
            return Ok((group, None));
        };
        let slot = rng.gen_range(0..group.len());
        let entry = &queue[rng.gen_range(0..queue.len())];
        let mut replayed = entry.trajectory.clone();
        replayed.origin = Origin::Replayed;
        let injection = Injection {
            task_id: group.task_id,
            slot,
            source: entry.inserted_at,
        };
        group.trajectories[slot] = replayed;
        group.injected_slot = Some(slot);
        self.injection_count += 1;
        Ok((group, Some(injection)))
    }

    pub fn serialize(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.write(&mut w);
        w.into_bytes()
    }

    pub fn restore(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let buffer = Self::read(&mut r)?;
        r.expect_end()?;
        Ok(buffer)
    }

    pub(crate) fn write(&self, w: &mut Writer) {
        w.bytes(MAGIC);
        w.u64(self.capacity_per_task as u64);
        w.u64(self.insertion_count);
        w.u64(self.eviction_count);
        w.u64(self.injection_count);
        w.len(self.queues.len());
        for (&task_id, queue) in &self.queues {
            w.u32(task_id);
            w.len(queue.len());
            for e in queue {
                w.u64(e.inserted_at);
                put_trajectory(w, &e.trajectory);
            }
        }
    }

    pub(crate) fn read(r: &mut Reader<'_>) -> Result<Self> {
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Corrupt {
                position: 0,
                message: "not a replay buffer".into(),
            });
        }
        let capacity_per_task = r.u64()? as usize;
        let insertion_count = r.u64()?;
        let eviction_count = r.u64()?;
        let injection_count = r.u64()?;
        let n_tasks = r.len(12)?;
        let mut queues = BTreeMap::new();
        for _ in 0..n_tasks {
            let task_id = r.u32()?;
            let n = r.len(16)?;
            if n > capacity_per_task {
                return Err(r.corrupt(format!(
                    "task {task_id} holds {n} entries, capacity is {capacity_per_task}"
                )));
            }
            let mut queue = VecDeque::with_capacity(n);
            for _ in 0..n {
                let inserted_at = r.u64()?;
                let trajectory = get_trajectory(r)?;
                if trajectory.task_id != task_id || !trajectory.is_success() {
                    return Err(r.corrupt(format!(
                        "entry {inserted_at} is not a success of task {task_id}"
                    )));
                }
                queue.push_back(ReplayEntry {
                    inserted_at,
                    trajectory,
                });
            }
            queues.insert(task_id, queue);
        }
        Ok(ReplayBuffer {
            capacity_per_task,
            queues,
            insertion_count,
            eviction_count,
            injection_count,
        })
    }
}
