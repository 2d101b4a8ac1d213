use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use crate::rational::Rational;

/// Tie-break classes for events sharing a timestamp, in processing order.
/// Job completions (class 0) and budget exhaustions are derived from core
/// state rather than queued.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub(crate) enum Class {
    VirtualTimeReached = 1,
    TaskRemove = 2,
    LbTimeout = 3,
    TaskInsert = 4,
    JobArrival = 5,
    MetricsSample = 8,
}

struct Entry<E> {
    time: Rational,
    class: Class,
    entity: u64,
    seq: u64,
    payload: E,
}

impl<E> Entry<E> {
    fn key(&self) -> (&Rational, Class, u64, u64) {
        (&self.time, self.class, self.entity, self.seq)
    }
}

impl<E> PartialEq for Entry<E> {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}

impl<E> Eq for Entry<E> {}

impl<E> PartialOrd for Entry<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Entry<E> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.key().cmp(&other.key())
    }
}

/// Min-queue ordered by `(time, class, entity, insertion)`.
pub(crate) struct EventQueue<E> {
    heap: BinaryHeap<Reverse<Entry<E>>>,
    seq: u64,
}

impl<E> EventQueue<E> {
    pub fn new() -> Self {
        EventQueue {
            heap: BinaryHeap::new(),
            seq: 0,
        }
    }

    pub fn push(&mut self, time: Rational, class: Class, entity: u64, payload: E) {
        self.seq += 1;
        self.heap.push(Reverse(Entry {
            time,
            class,
            entity,
            seq: self.seq,
            payload,
        }));
    }

    pub fn peek_time(&self) -> Option<&Rational> {
        self.heap.peek().map(|Reverse(e)| &e.time)
    }

    /// Pops the next event if it is due exactly at `t`.
    pub fn pop_at(&mut self, t: &Rational) -> Option<E> {
        if self.peek_time()? == t {
            self.heap.pop().map(|Reverse(e)| e.payload)
        } else {
            None
        }
    }

    #[cfg(test)]
    pub fn len(&self) -> usize {
        self.heap.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orders_by_time_then_class_then_entity() {
        let mut q = EventQueue::new();
        q.push(Rational::from(5u64), Class::JobArrival, 1, "arr1");
        q.push(Rational::from(5u64), Class::VirtualTimeReached, 9, "vt9");
        q.push(Rational::new(9, 2), Class::MetricsSample, 0, "early");
        q.push(Rational::from(5u64), Class::JobArrival, 0, "arr0");
        let t = Rational::new(9, 2);
        assert_eq!(q.pop_at(&t), Some("early"));
        assert_eq!(q.pop_at(&t), None);
        let t = Rational::from(5u64);
        let order: Vec<_> = std::iter::from_fn(|| q.pop_at(&t)).collect();
        assert_eq!(order, vec!["vt9", "arr0", "arr1"]);
        assert_eq!(q.len(), 0);
    }
}
