//! Threaded wrapper: one writer thread owns all mutation, rebuild jobs run on
//! their own threads, and readers answer queries under a shared lock.

use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use crossbeam::channel::{self, Receiver, Sender};
use parking_lot::{Mutex, RwLock};

use super::{Engine, EngineStatus, JobResult, RebuildJob, RepartitionOutcome};
use crate::archive::Event;
use crate::error::{AqpError, Result};
use crate::estimator::QueryAnswer;
use crate::model::{EngineConfig, Query};

enum Command {
    Apply(Event),
    CatchupTick(usize),
    Rebuild,
    JobDone(RebuildJob, Result<JobResult>),
    /// Replies once every earlier command and any running job has finished.
    Flush(Sender<()>),
    Shutdown,
}

pub struct SharedEngine {
    engine: Arc<RwLock<Engine>>,
    tx: Sender<Command>,
    errors: Arc<Mutex<Vec<AqpError>>>,
    outcomes: Arc<Mutex<Vec<RepartitionOutcome>>>,
    writer: Option<JoinHandle<()>>,
    ticker: Option<(Sender<()>, JoinHandle<()>)>,
}

impl SharedEngine {
    pub fn new(cfg: EngineConfig) -> Result<Self> {
        Self::from_engine(Engine::new(cfg)?)
    }

    pub fn from_engine(mut engine: Engine) -> Result<Self> {
        engine.set_external_jobs(true);
        let engine = Arc::new(RwLock::new(engine));
        let (tx, rx) = channel::unbounded();
        let errors = Arc::new(Mutex::new(Vec::new()));
        let outcomes = Arc::new(Mutex::new(Vec::new()));
        let writer = {
            let (engine, errors, outcomes, tx) = (engine.clone(), errors.clone(), outcomes.clone(), tx.clone());
            thread::Builder::new()
                .name("aqp-writer".into())
                .spawn(move || writer_loop(engine, rx, tx, errors, outcomes))
                .map_err(|e| AqpError::InvalidConfig(format!("cannot spawn writer: {e}")))?
        };
        Ok(Self { engine, tx, errors, outcomes, writer: Some(writer), ticker: None })
    }

    /// Feeds `batch` catch-up draws to the writer every `every`.
    pub fn start_catchup(&mut self, batch: usize, every: Duration) {
        if self.ticker.is_some() {
            return;
        }
        let (stop_tx, stop_rx) = channel::bounded::<()>(1);
        let tx = self.tx.clone();
        let handle = thread::spawn(move || loop {
            match stop_rx.recv_timeout(every) {
                Err(channel::RecvTimeoutError::Timeout) => {
                    if tx.send(Command::CatchupTick(batch)).is_err() {
                        break;
                    }
                }
                _ => break,
            }
        });
        self.ticker = Some((stop_tx, handle));
    }

    pub fn stop_catchup(&mut self) {
        if let Some((stop, handle)) = self.ticker.take() {
            let _ = stop.send(());
            let _ = handle.join();
        }
    }

    /// Queues an update. Failures surface on the next `flush`.
    pub fn apply(&self, ev: Event) -> Result<()> {
        self.tx.send(Command::Apply(ev)).map_err(|_| AqpError::Unanswerable("engine is shut down".into()))
    }

    /// Waits for queued updates and running jobs, then reports the first error.
    pub fn flush(&self) -> Result<()> {
        let (reply, done) = channel::bounded(1);
        self.tx.send(Command::Flush(reply)).map_err(|_| AqpError::Unanswerable("engine is shut down".into()))?;
        let _ = done.recv();
        let mut errs = self.errors.lock();
        if errs.is_empty() { Ok(()) } else { Err(errs.remove(0)) }
    }

    /// Answers against whatever the writer has applied so far. Waits while a
    /// new tree is being populated.
    pub fn answer(&self, q: &Query) -> Result<QueryAnswer> {
        {
            let e = self.engine.read();
            if e.is_initialized() || e.archive().len() < e.config().k {
                return e.answer(q);
            }
        }
        self.engine.write().query(q)
    }

    pub fn status(&self) -> EngineStatus {
        self.engine.write().status()
    }

    pub fn outcomes(&self) -> Vec<RepartitionOutcome> {
        self.outcomes.lock().clone()
    }

    /// Queues a forced rebuild behind the updates sent so far.
    pub fn request_rebuild(&self) -> Result<()> {
        self.tx.send(Command::Rebuild).map_err(|_| AqpError::Unanswerable("engine is shut down".into()))
    }

    /// Direct access for inspection; holding it stalls the writer.
    pub fn engine(&self) -> &Arc<RwLock<Engine>> {
        &self.engine
    }

    /// Stops all threads and returns the engine.
    pub fn shutdown(mut self) -> Result<Engine> {
        self.flush()?;
        self.close();
        let engine = std::mem::replace(&mut self.engine, Arc::new(RwLock::new(Engine::new(EngineConfig::default())?)));
        Arc::try_unwrap(engine)
            .map(|lock| {
                let mut e = lock.into_inner();
                e.set_external_jobs(false);
                e
            })
            .map_err(|_| AqpError::Unanswerable("engine still shared".into()))
    }

    fn close(&mut self) {
        self.stop_catchup();
        if let Some(w) = self.writer.take() {
            let _ = self.tx.send(Command::Shutdown);
            let _ = w.join();
        }
    }
}

impl Drop for SharedEngine {
    fn drop(&mut self) {
        self.close();
    }
}

fn writer_loop(
    engine: Arc<RwLock<Engine>>,
    rx: Receiver<Command>,
    tx: Sender<Command>,
    errors: Arc<Mutex<Vec<AqpError>>>,
    outcomes: Arc<Mutex<Vec<RepartitionOutcome>>>,
) {
    let mut running: Option<JoinHandle<()>> = None;
    let mut waiting: Vec<Sender<()>> = Vec::new();
    let mut shutting_down = false;
    while let Ok(cmd) = rx.recv() {
        let res = match cmd {
            Command::Apply(ev) => engine.write().apply(ev),
            Command::CatchupTick(n) => engine.write().step_catchup(n).map(|_| ()),
            Command::Rebuild => {
                engine.write().request_rebuild();
                Ok(())
            }
            Command::JobDone(job, res) => {
                if let Some(h) = running.take() {
                    let _ = h.join();
                }
                engine.write().complete_job(job, res).map(|o| outcomes.lock().push(o))
            }
            Command::Flush(reply) => {
                waiting.push(reply);
                Ok(())
            }
            Command::Shutdown => {
                shutting_down = true;
                Ok(())
            }
        };
        if let Err(e) = res {
            errors.lock().push(e);
        }
        if running.is_none() && !shutting_down {
            let job = engine.write().take_job();
            if let Some(job) = job {
                let tx = tx.clone();
                running = Some(thread::spawn(move || {
                    let res = job.run();
                    let _ = tx.send(Command::JobDone(job, res));
                }));
            }
        }
        if running.is_none() {
            for w in waiting.drain(..) {
                let _ = w.send(());
            }
            if shutting_down {
                break;
            }
        }
    }
}
