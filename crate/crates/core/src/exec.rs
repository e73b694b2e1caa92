use alloc::vec::Vec;

/// Runs independent jobs and returns their results in job order.
///
/// Implementations may run jobs concurrently; each job must derive all of
/// its randomness from its index so results do not depend on scheduling.
pub trait Executor: Sync {
    fn map<R, F>(&self, jobs: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send;
}

/// Runs jobs one after another on the calling thread.
#[derive(Debug, Clone, Copy, Default)]
pub struct Sequential;

impl Executor for Sequential {
    fn map<R, F>(&self, jobs: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        (0..jobs).map(f).collect()
    }
}
