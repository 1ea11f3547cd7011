//! Bounded lock-free queues connecting the two pipeline stages.

use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Duration;

use crossbeam_queue::ArrayQueue;

/// Default capacity, in messages, of each inter-stage queue.
pub const DEFAULT_QUEUE_CAPACITY: usize = 64;

const SPIN_LIMIT: u32 = 64;
const YIELD_LIMIT: u32 = 256;
const PARK: Duration = Duration::from_micros(20);

/// Spin, then yield, then briefly sleep while waiting on a queue.
#[derive(Debug, Default)]
pub struct IdleWait {
    step: u32,
}

impl IdleWait {
    pub fn new() -> Self {
        IdleWait { step: 0 }
    }

    #[inline]
    pub fn reset(&mut self) {
        self.step = 0;
    }

    #[inline]
    pub fn wait(&mut self) {
        if self.step < SPIN_LIMIT {
            std::hint::spin_loop();
        } else if self.step < SPIN_LIMIT + YIELD_LIMIT {
            std::thread::yield_now();
        } else {
            // Oversubscribed hosts (more workers than CPUs) need the
            // producer to actually get scheduled.
            std::thread::sleep(PARK);
        }
        self.step = self.step.saturating_add(1);
    }
}

/// Multi-producer queue with a single consumer per instance.
///
/// FIFO order holds per producer. `push` never drops a message: it waits for
/// space and only gives up when the run is aborted.
#[derive(Debug)]
pub struct TileQueue<T> {
    inner: ArrayQueue<T>,
}

impl<T> TileQueue<T> {
    pub fn new(capacity: usize) -> Self {
        TileQueue {
            inner: ArrayQueue::new(capacity.max(1)),
        }
    }

    /// Enqueues `msg`, backing off while the queue is full. Returns the
    /// message back if `abort` is raised before space frees up.
    pub fn push(&self, mut msg: T, abort: &AtomicBool) -> Result<(), T> {
        let mut idle = IdleWait::new();
        loop {
            match self.inner.push(msg) {
                Ok(()) => return Ok(()),
                Err(back) => {
                    if abort.load(Ordering::Relaxed) {
                        return Err(back);
                    }
                    msg = back;
                    idle.wait();
                }
            }
        }
    }

    /// Non-blocking dequeue.
    #[inline]
    pub fn try_pop(&self) -> Option<T> {
        self.inner.pop()
    }

    pub fn len(&self) -> usize {
        self.inner.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.inner.capacity()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    #[test]
    fn push_then_pop() {
        let q = TileQueue::new(4);
        let abort = AtomicBool::new(false);
        q.push(7u32, &abort).unwrap();
        assert_eq!(q.try_pop(), Some(7));
        assert_eq!(q.try_pop(), None);
    }

    #[test]
    fn full_queue_gives_message_back_on_abort() {
        let q = TileQueue::new(1);
        let abort = AtomicBool::new(false);
        q.push(1u32, &abort).unwrap();
        abort.store(true, Ordering::Relaxed);
        assert_eq!(q.push(2, &abort), Err(2));
        assert_eq!(q.len(), 1);
    }

    #[test]
    fn many_producers_no_loss_fifo_per_producer() {
        const PRODUCERS: usize = 4;
        const PER: usize = 1000;
        let q = Arc::new(TileQueue::new(8));
        let abort = Arc::new(AtomicBool::new(false));
        let handles: Vec<_> = (0..PRODUCERS)
            .map(|p| {
                let q = Arc::clone(&q);
                let abort = Arc::clone(&abort);
                std::thread::spawn(move || {
                    for i in 0..PER {
                        q.push((p, i), &abort).unwrap();
                    }
                })
            })
            .collect();
        let mut next = [0usize; PRODUCERS];
        let mut received = 0;
        let mut idle = IdleWait::new();
        while received < PRODUCERS * PER {
            match q.try_pop() {
                Some((p, i)) => {
                    assert_eq!(i, next[p], "producer {p} out of order");
                    next[p] += 1;
                    received += 1;
                    idle.reset();
                }
                None => idle.wait(),
            }
        }
        for h in handles {
            h.join().unwrap();
        }
        assert_eq!(next, [PER; PRODUCERS]);
        assert!(q.try_pop().is_none());
    }
}
