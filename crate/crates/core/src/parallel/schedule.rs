//! Wavefront schedules: the dependency DAG of (step, layer) tasks and its
//! grouping into parallel waves.
//!
//! Encoder and decoder form one continuous step axis (decoder step 0
//! follows encoder step M-1 at every layer), so the dependency rule is
//! uniform: task (t, l) waits for (t-1, l) and (t, l-1). Removing
//! input-feeding keeps it that way and the whole grid pipelines
//! diagonally; with input-feeding the decoder's first layer additionally
//! waits for the previous step's attention output, which serializes the
//! decoder.

use crate::model::graph::Side;
use crate::model::Variant;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TaskKind {
    Stack { side: Side, t: usize, layer: usize },
    /// Attention for decoder step `t`.
    Attn { t: usize },
}

#[derive(Debug, Clone)]
pub struct Task {
    pub kind: TaskKind,
    /// Longest-path depth from any source task (0-based).
    pub wave: usize,
    pub deps: Vec<usize>,
}

impl Task {
    pub fn label(&self) -> String {
        match &self.kind {
            TaskKind::Stack { side, t, layer } => {
                format!("fwd:{}:t{t}:l{layer}", side.label())
            }
            TaskKind::Attn { t } => format!("attn:t{t}"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct WavefrontSchedule {
    pub m: usize,
    pub n_dec: usize,
    pub depth: usize,
    pub variant: Variant,
    pub tasks: Vec<Task>,
    /// Number of waves spanned by encoder stack tasks alone.
    pub enc_waves: usize,
    /// Number of waves spanned by the full forward DAG.
    pub waves: usize,
}

impl WavefrontSchedule {
    pub fn task_index(&self, kind: &TaskKind) -> Option<usize> {
        self.tasks.iter().position(|t| &t.kind == kind)
    }

    /// Critical-path length in unit-cost tasks (= wave count).
    pub fn critical_path(&self) -> usize {
        self.waves
    }
}

/// Builds the forward dependency DAG for `m` encoder steps, `n_dec`
/// decoder steps and `depth` layers, and levels it into waves by longest
/// path. Tasks within one wave are mutually independent.
pub fn wavefront_order(
    m: usize,
    n_dec: usize,
    depth: usize,
    variant: Variant,
) -> WavefrontSchedule {
    assert!(m >= 1 && n_dec >= 1 && depth >= 1);
    let mut tasks: Vec<Task> = Vec::new();
    let stack_idx = |side: Side, t: usize, layer: usize| -> usize {
        match side {
            Side::Enc => t * depth + layer,
            Side::Dec => (m + t) * depth + layer,
        }
    };
    for (side, steps) in [(Side::Enc, m), (Side::Dec, n_dec)] {
        for t in 0..steps {
            for layer in 0..depth {
                let mut deps = Vec::new();
                // Previous step, same layer (decoder step 0 chains to the
                // encoder's last step through the state bridge).
                match (side, t) {
                    (Side::Enc, 0) => {}
                    (Side::Enc, _) => deps.push(stack_idx(Side::Enc, t - 1, layer)),
                    (Side::Dec, 0) => deps.push(stack_idx(Side::Enc, m - 1, layer)),
                    (Side::Dec, _) => deps.push(stack_idx(Side::Dec, t - 1, layer)),
                }
                // Same step, layer below.
                if layer > 0 {
                    deps.push(stack_idx(side, t, layer - 1));
                }
                // Input-feeding: decoder layer 0 waits for the previous
                // step's attention output (attention tasks are appended
                // after all stack tasks, at index (m+n)*depth + t).
                if variant == Variant::InputFeeding && side == Side::Dec && layer == 0 && t > 0 {
                    deps.push((m + n_dec) * depth + (t - 1));
                }
                tasks.push(Task {
                    kind: TaskKind::Stack { side, t, layer },
                    wave: 0,
                    deps,
                });
            }
        }
    }
    let attn_base = tasks.len();
    debug_assert_eq!(attn_base, (m + n_dec) * depth);
    for t in 0..n_dec {
        // Attention needs this step's decoder top state and the full S,
        // delivered transitively by the encoder's last top-layer task.
        let deps = vec![
            stack_idx(Side::Dec, t, depth - 1),
            stack_idx(Side::Enc, m - 1, depth - 1),
        ];
        tasks.push(Task {
            kind: TaskKind::Attn { t },
            wave: 0,
            deps,
        });
    }

    // Longest-path leveling (tasks are in a valid topological order except
    // for the input-feeding back-edges, which point at attention tasks; we
    // relax until fixed point, which converges in at most n_dec rounds).
    let total = tasks.len();
    let mut changed = true;
    while changed {
        changed = false;
        for i in 0..total {
            let wave = tasks[i]
                .deps
                .iter()
                .map(|&d| tasks[d].wave + 1)
                .max()
                .unwrap_or(0);
            if wave != tasks[i].wave {
                tasks[i].wave = wave;
                changed = true;
            }
        }
    }

    let enc_waves = tasks
        .iter()
        .filter(|t| matches!(t.kind, TaskKind::Stack { side: Side::Enc, .. }))
        .map(|t| t.wave)
        .max()
        .unwrap()
        + 1;
    let waves = tasks.iter().map(|t| t.wave).max().unwrap() + 1;
    WavefrontSchedule {
        m,
        n_dec,
        depth,
        variant,
        tasks,
        enc_waves,
        waves,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Exhaustive longest-path oracle: walks every path in the DAG.
    fn longest_path_exhaustive(s: &WavefrontSchedule) -> usize {
        fn walk(tasks: &[Task], i: usize) -> usize {
            tasks[i]
                .deps
                .iter()
                .map(|&d| 1 + walk(tasks, d))
                .max()
                .unwrap_or(0)
        }
        (0..s.tasks.len())
            .map(|i| walk(&s.tasks, i))
            .max()
            .unwrap()
            + 1
    }

    #[test]
    fn depth_one_degenerates_to_left_to_right() {
        let s = wavefront_order(5, 3, 1, Variant::NoInputFeeding);
        for t in 0..5 {
            let i = s
                .task_index(&TaskKind::Stack {
                    side: Side::Enc,
                    t,
                    layer: 0,
                })
                .unwrap();
            assert_eq!(s.tasks[i].wave, t);
        }
        assert_eq!(s.enc_waves, 5);
    }

    #[test]
    fn encoder_waves_are_m_plus_l_minus_one() {
        let s = wavefront_order(5, 1, 4, Variant::NoInputFeeding);
        assert_eq!(s.enc_waves, 5 + 4 - 1);
        for t in 0..5 {
            for l in 0..4 {
                let i = s
                    .task_index(&TaskKind::Stack {
                        side: Side::Enc,
                        t,
                        layer: l,
                    })
                    .unwrap();
                assert_eq!(s.tasks[i].wave, t + l, "({t},{l})");
            }
        }
    }

    #[test]
    fn no_input_feeding_decoder_continues_the_diagonal() {
        let s = wavefront_order(4, 3, 2, Variant::NoInputFeeding);
        for t in 0..3 {
            for l in 0..2 {
                let i = s
                    .task_index(&TaskKind::Stack {
                        side: Side::Dec,
                        t,
                        layer: l,
                    })
                    .unwrap();
                assert_eq!(s.tasks[i].wave, (4 + t) + l);
            }
        }
    }

    #[test]
    fn input_feeding_critical_path_exceeds_no_input_feeding() {
        // Exact integer comparison against the exhaustive oracle.
        for (m, n, l) in [(5, 5, 4), (3, 4, 2), (2, 3, 3)] {
            let with_if = wavefront_order(m, n, l, Variant::InputFeeding);
            let without = wavefront_order(m, n, l, Variant::NoInputFeeding);
            assert_eq!(with_if.waves, longest_path_exhaustive(&with_if));
            assert_eq!(without.waves, longest_path_exhaustive(&without));
            assert!(
                with_if.waves > without.waves,
                "({m},{n},{l}): {} vs {}",
                with_if.waves,
                without.waves
            );
        }
    }

    #[test]
    fn input_feeding_serializes_decoder_steps() {
        let s = wavefront_order(2, 4, 2, Variant::InputFeeding);
        // Each decoder step's layer 0 must start after the previous step's
        // attention, so waves strictly increase by at least depth between
        // consecutive decoder steps.
        let wave_of = |t: usize| {
            let i = s
                .task_index(&TaskKind::Stack {
                    side: Side::Dec,
                    t,
                    layer: 0,
                })
                .unwrap();
            s.tasks[i].wave
        };
        for t in 1..4 {
            assert!(wave_of(t) >= wave_of(t - 1) + 3);
        }
    }

    #[test]
    fn dag_is_acyclic_and_deps_precede() {
        let s = wavefront_order(3, 3, 4, Variant::InputFeeding);
        for task in &s.tasks {
            for &d in &task.deps {
                assert!(s.tasks[d].wave < task.wave);
            }
        }
    }
}
