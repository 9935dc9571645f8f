use rayon::prelude::*;
use rwenas_core::genome::Genome;
use rwenas_core::moea::{Dispatch, EvalFailure, Evaluate, Evaluation};

/// Evaluates jobs on a fixed-size thread pool. Results come back in job
/// order, so the worker count never changes what a search does.
pub struct WorkerPool {
    pool: rayon::ThreadPool,
}

impl WorkerPool {
    pub fn new(workers: usize) -> Result<Self, rayon::ThreadPoolBuildError> {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build()?;
        Ok(WorkerPool { pool })
    }

    pub fn workers(&self) -> usize {
        self.pool.current_num_threads()
    }
}

impl Dispatch for WorkerPool {
    fn evaluate_all<E: Evaluate + ?Sized>(&self, evaluator: &E, jobs: &[(Genome, u64)]) -> Vec<Result<Evaluation, EvalFailure>> {
        self.pool.install(|| {
            jobs.par_iter().with_max_len(1).map(|(g, seed)| evaluator.evaluate(g, *seed)).collect()
        })
    }
}
