//! The event loop.
//!
//! Normal jobs start strictly first come, first served and see fill-in
//! cores as free: starting one preempts fill-in jobs, largest first. Fill-in
//! jobs start first-fit into cores that are genuinely idle. Both classes
//! respect reservations: a job may not start if its walltime reaches into a
//! reservation that would then be short of room.
//!
//! Normal-side events only ever trigger normal dispatch passes and the
//! normal pass never looks at fill-in state, so the normal schedule is the
//! same whether or not fill-in jobs exist.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BinaryHeap, VecDeque};

use super::config::ClusterConfig;
use super::{JobClass, JobSpec, LoadSample, Reservation, ReservationKind, Secs};

const PRIO_JOB_END: u8 = 0;
const PRIO_RESERVATION_END: u8 = 1;
const PRIO_RESERVATION_START: u8 = 2;
const PRIO_SUBMIT: u8 = 3;
const PRIO_NORMAL_DISPATCH: u8 = 4;
const PRIO_FILLIN_DISPATCH: u8 = 5;
/// Where an external supervisor tick falls among same-time events.
pub const PRIO_TICK: u8 = 6;
const PRIO_SAMPLE: u8 = 7;

/// Fill-in job ids live far above normal ones so that the two never
/// influence each other's numbering.
pub const FILLIN_ID_BASE: u64 = 1 << 40;

#[derive(Debug)]
enum EventKind {
    JobEnd { serial: u64 },
    ReservationStart(usize),
    ReservationEnd(usize),
    Submit(Box<JobSpec>),
    NormalDispatch,
    FillinDispatch,
    Sample(u64),
}

#[derive(Debug)]
struct Event {
    time: Secs,
    prio: u8,
    job_id: u64,
    seq: u64,
    kind: EventKind,
}

impl Event {
    fn key(&self) -> (Secs, u8, u64, u64) {
        (self.time, self.prio, self.job_id, self.seq)
    }
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        self.key().cmp(&other.key())
    }
}

#[derive(Debug, Clone)]
struct Running {
    spec: JobSpec,
    start: Secs,
    serial: u64,
}

/// What a supervisor can see of the fill-in side.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimView {
    pub now: Secs,
    pub free_units: u32,
    /// (job_id, units, submit_time), oldest first
    pub queued_fillin: Vec<(u64, u32, Secs)>,
    /// (job_id, units, start_time)
    pub running_fillin: Vec<(u64, u32, Secs)>,
    pub next_reservation: Option<Secs>,
}

pub struct Engine {
    now: Secs,
    horizon: Secs,
    units: u32,
    cores_per_unit: u32,
    latency: Secs,
    fillin_cap: Option<u32>,
    reservations: Vec<Reservation>,
    /// units taken by each machine reservation while it is active
    reservation_alloc: Vec<u32>,
    masked: u32,
    normal_alloc: u32,
    reserved_alloc: u32,
    fillin_alloc: u32,
    running: BTreeMap<u64, Running>,
    waiting_normal: VecDeque<JobSpec>,
    waiting_fillin: BTreeMap<u64, JobSpec>,
    events: BinaryHeap<Reverse<Event>>,
    seq: u64,
    serial: u64,
    next_fillin_id: u64,
    trace: Vec<LoadSample>,
    normal_starts: Vec<(u64, Secs)>,
    max_running_fillin: u32,
    preemptions: u64,
}

impl Engine {
    pub fn new(cluster: &ClusterConfig, reservations: &[Reservation], jobs: Vec<JobSpec>) -> Self {
        let mut e = Engine {
            now: 0,
            horizon: cluster.horizon_min * 60,
            units: cluster.units,
            cores_per_unit: cluster.cores_per_unit,
            latency: cluster.dispatch_latency_s,
            fillin_cap: cluster.fillin_job_cap,
            reservations: reservations.to_vec(),
            reservation_alloc: vec![0; reservations.len()],
            masked: 0,
            normal_alloc: 0,
            reserved_alloc: 0,
            fillin_alloc: 0,
            running: BTreeMap::new(),
            waiting_normal: VecDeque::new(),
            waiting_fillin: BTreeMap::new(),
            events: BinaryHeap::new(),
            seq: 0,
            serial: 0,
            next_fillin_id: FILLIN_ID_BASE,
            trace: Vec::with_capacity(cluster.horizon_min as usize),
            normal_starts: Vec::new(),
            max_running_fillin: 0,
            preemptions: 0,
        };
        for (i, r) in reservations.iter().enumerate() {
            e.push(r.start, PRIO_RESERVATION_START, 0, EventKind::ReservationStart(i));
            e.push(r.end, PRIO_RESERVATION_END, 0, EventKind::ReservationEnd(i));
        }
        for job in jobs {
            let (t, id) = (job.submit_time, job.job_id);
            e.push(t, PRIO_SUBMIT, id, EventKind::Submit(Box::new(job)));
        }
        for m in 0..cluster.horizon_min {
            e.push(m * 60, PRIO_SAMPLE, 0, EventKind::Sample(m));
        }
        e
    }

    pub fn now(&self) -> Secs {
        self.now
    }

    pub fn horizon(&self) -> Secs {
        self.horizon
    }

    pub fn trace(&self) -> &[LoadSample] {
        &self.trace
    }

    /// (job_id, start_time) of every normal job start, in start order.
    pub fn normal_starts(&self) -> &[(u64, Secs)] {
        &self.normal_starts
    }

    /// Largest number of simultaneously running fill-in jobs seen after any
    /// event.
    pub fn max_running_fillin(&self) -> u32 {
        self.max_running_fillin
    }

    pub fn preemptions(&self) -> u64 {
        self.preemptions
    }

    pub fn capacity_units(&self) -> u32 {
        self.units - self.masked
    }

    pub fn free_units(&self) -> u32 {
        self.capacity_units()
            .saturating_sub(self.normal_alloc + self.reserved_alloc + self.fillin_alloc)
    }

    pub fn view(&self) -> SimView {
        let running_fillin = self
            .running
            .values()
            .filter(|r| r.spec.job_class == JobClass::FillIn)
            .map(|r| (r.spec.job_id, r.spec.cores, r.start))
            .collect();
        SimView {
            now: self.now,
            free_units: self.free_units(),
            queued_fillin: self
                .waiting_fillin
                .values()
                .map(|j| (j.job_id, j.cores, j.submit_time))
                .collect(),
            running_fillin,
            next_reservation: self
                .reservations
                .iter()
                .map(|r| r.start)
                .filter(|&s| s > self.now)
                .min(),
        }
    }

    /// Processes every event that precedes a supervisor tick at `t`.
    pub fn advance_to(&mut self, t: Secs) {
        while let Some(Reverse(top)) = self.events.peek() {
            if (top.time, top.prio) >= (t, PRIO_TICK) {
                break;
            }
            let Reverse(ev) = self.events.pop().expect("peeked");
            self.now = ev.time;
            self.process(ev);
        }
        self.now = self.now.max(t);
    }

    /// Runs to the horizon.
    pub fn run_to_end(&mut self) {
        while let Some(Reverse(top)) = self.events.peek() {
            if top.time >= self.horizon {
                break;
            }
            let Reverse(ev) = self.events.pop().expect("peeked");
            self.now = ev.time;
            self.process(ev);
        }
        self.now = self.now.max(self.horizon);
    }

    /// Queues a fill-in job now; it is considered at the next dispatch pass.
    pub fn submit_fillin(&mut self, units: u32, walltime: Secs, requeue: bool) -> u64 {
        let job_id = self.next_fillin_id;
        self.next_fillin_id += 1;
        let walltime = walltime.max(1);
        self.waiting_fillin.insert(
            job_id,
            JobSpec {
                job_id,
                cores: units.max(1),
                walltime,
                runtime: walltime,
                submit_time: self.now,
                job_class: JobClass::FillIn,
                requeue_on_preempt: requeue,
            },
        );
        self.trigger(JobClass::FillIn);
        job_id
    }

    /// Cancels a queued or running fill-in job. Returns false for unknown ids.
    pub fn cancel(&mut self, job_id: u64) -> bool {
        if self.waiting_fillin.remove(&job_id).is_some() {
            return true;
        }
        match self.running.get(&job_id) {
            Some(r) if r.spec.job_class == JobClass::FillIn => {
                self.release(job_id);
                self.trigger(JobClass::FillIn);
                true
            }
            _ => false,
        }
    }

    fn push(&mut self, time: Secs, prio: u8, job_id: u64, kind: EventKind) {
        self.seq += 1;
        self.events.push(Reverse(Event {
            time,
            prio,
            job_id,
            seq: self.seq,
            kind,
        }));
    }

    fn trigger(&mut self, class: JobClass) {
        let t = self.now + self.latency;
        match class {
            JobClass::Normal => self.push(t, PRIO_NORMAL_DISPATCH, 0, EventKind::NormalDispatch),
            JobClass::FillIn => self.push(t, PRIO_FILLIN_DISPATCH, 0, EventKind::FillinDispatch),
        }
    }

    fn process(&mut self, ev: Event) {
        match ev.kind {
            EventKind::JobEnd { serial } => {
                if self.running.get(&ev.job_id).is_some_and(|r| r.serial == serial) {
                    let class = self.release(ev.job_id);
                    self.trigger(class);
                }
            }
            EventKind::ReservationStart(i) => {
                match self.reservations[i].kind {
                    ReservationKind::Mask { units } => self.masked += units,
                    ReservationKind::Machine => {
                        let take = self
                            .capacity_units()
                            .saturating_sub(self.normal_alloc + self.reserved_alloc);
                        self.reservation_alloc[i] = take;
                        self.reserved_alloc += take;
                    }
                }
                self.enforce_capacity();
                self.trigger(JobClass::Normal);
            }
            EventKind::ReservationEnd(i) => {
                match self.reservations[i].kind {
                    ReservationKind::Mask { units } => self.masked -= units,
                    ReservationKind::Machine => {
                        self.reserved_alloc -= self.reservation_alloc[i];
                        self.reservation_alloc[i] = 0;
                    }
                }
                self.trigger(JobClass::Normal);
            }
            EventKind::Submit(job) => {
                let class = job.job_class;
                match class {
                    JobClass::Normal => self.waiting_normal.push_back(*job),
                    JobClass::FillIn => {
                        self.waiting_fillin.insert(job.job_id, *job);
                    }
                }
                self.trigger(class);
            }
            EventKind::NormalDispatch => {
                self.dispatch_normal();
                self.dispatch_fillin();
            }
            EventKind::FillinDispatch => self.dispatch_fillin(),
            EventKind::Sample(m) => {
                let cpu = self.cores_per_unit as u64;
                self.trace.push(LoadSample {
                    t_min: m,
                    normal_cores: (self.normal_alloc + self.reserved_alloc) as u64 * cpu,
                    fillin_cores: self.fillin_alloc as u64 * cpu,
                    capacity: self.capacity_units() as u64 * cpu,
                });
            }
        }
        let running_fillin = self.running_fillin_count();
        self.max_running_fillin = self.max_running_fillin.max(running_fillin);
    }

    fn running_fillin_count(&self) -> u32 {
        self.running
            .values()
            .filter(|r| r.spec.job_class == JobClass::FillIn)
            .count() as u32
    }

    fn dispatch_normal(&mut self) {
        while let Some(head) = self.waiting_normal.front() {
            let avail = self
                .capacity_units()
                .saturating_sub(self.normal_alloc + self.reserved_alloc);
            if head.cores > avail || !self.fits_reservations(head.walltime, head.cores, JobClass::Normal) {
                break;
            }
            let job = self.waiting_normal.pop_front().expect("peeked");
            let free = avail.saturating_sub(self.fillin_alloc);
            if job.cores > free {
                self.preempt(job.cores - free);
            }
            self.start(job);
        }
    }

    fn dispatch_fillin(&mut self) {
        let ids: Vec<u64> = self.waiting_fillin.keys().copied().collect();
        for id in ids {
            if self.fillin_cap.is_some_and(|cap| self.running_fillin_count() >= cap) {
                break;
            }
            let job = &self.waiting_fillin[&id];
            if job.cores <= self.free_units() && self.fits_reservations(job.walltime, job.cores, JobClass::FillIn) {
                let job = self.waiting_fillin.remove(&id).expect("present");
                self.start(job);
            }
        }
    }

    /// Whether a job of `units` starting now for `walltime` leaves every
    /// upcoming reservation the room it needs. Normal jobs only count normal
    /// commitments, so fill-in jobs can never hold them back.
    fn fits_reservations(&self, walltime: Secs, units: u32, class: JobClass) -> bool {
        let end = self.now + walltime;
        for r in &self.reservations {
            if r.start <= self.now || r.start >= end {
                continue;
            }
            if r.kind == ReservationKind::Machine {
                return false;
            }
            let masked_then: u32 = self
                .reservations
                .iter()
                .filter(|o| o.start <= r.start && r.start < o.end)
                .map(|o| match o.kind {
                    ReservationKind::Mask { units } => units,
                    ReservationKind::Machine => self.units,
                })
                .sum();
            let capacity_then = self.units.saturating_sub(masked_then);
            let committed: u32 = self
                .running
                .values()
                .filter(|x| x.start + x.spec.walltime > r.start)
                .filter(|x| class == JobClass::FillIn || x.spec.job_class == JobClass::Normal)
                .map(|x| x.spec.cores)
                .sum();
            if committed + units > capacity_then {
                return false;
            }
        }
        true
    }

    /// Frees at least `needed` units by preempting fill-in jobs, largest
    /// first, latest start breaking ties.
    fn preempt(&mut self, needed: u32) {
        let mut victims: Vec<(u32, Secs, u64)> = self
            .running
            .values()
            .filter(|r| r.spec.job_class == JobClass::FillIn)
            .map(|r| (r.spec.cores, r.start, r.spec.job_id))
            .collect();
        victims.sort_by(|a, b| b.cmp(a));
        let mut freed = 0;
        for (cores, _, id) in victims {
            if freed >= needed {
                break;
            }
            let spec = self.running[&id].spec.clone();
            self.release(id);
            self.preemptions += 1;
            freed += cores;
            if spec.requeue_on_preempt {
                self.waiting_fillin.insert(id, spec);
            }
        }
    }

    fn enforce_capacity(&mut self) {
        let used = self.normal_alloc + self.reserved_alloc + self.fillin_alloc;
        let cap = self.capacity_units();
        if used > cap {
            self.preempt(used - cap);
        }
    }

    fn start(&mut self, job: JobSpec) {
        self.serial += 1;
        let serial = self.serial;
        match job.job_class {
            JobClass::Normal => {
                self.normal_alloc += job.cores;
                self.normal_starts.push((job.job_id, self.now));
            }
            JobClass::FillIn => self.fillin_alloc += job.cores,
        }
        let end = self.now + job.runtime;
        let id = job.job_id;
        self.running.insert(
            id,
            Running {
                spec: job,
                start: self.now,
                serial,
            },
        );
        self.push(end, PRIO_JOB_END, id, EventKind::JobEnd { serial });
    }

    fn release(&mut self, job_id: u64) -> JobClass {
        let r = self.running.remove(&job_id).expect("releasing a running job");
        match r.spec.job_class {
            JobClass::Normal => self.normal_alloc -= r.spec.cores,
            JobClass::FillIn => self.fillin_alloc -= r.spec.cores,
        }
        r.spec.job_class
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cluster(units: u32, horizon_min: u64) -> ClusterConfig {
        ClusterConfig {
            units,
            cores_per_unit: 1,
            dispatch_latency_s: 0,
            horizon_min,
            fillin_job_cap: None,
        }
    }

    fn normal(job_id: u64, cores: u32, walltime: Secs, submit_time: Secs) -> JobSpec {
        JobSpec {
            job_id,
            cores,
            walltime,
            runtime: walltime,
            submit_time,
            job_class: JobClass::Normal,
            requeue_on_preempt: false,
        }
    }

    #[test]
    fn normal_job_preempts_all_fillin_immediately() {
        let mut e = Engine::new(&cluster(24, 1), &[], vec![normal(1, 24, 100, 10)]);
        for _ in 0..6 {
            e.submit_fillin(4, 10_000, false);
        }
        e.advance_to(1);
        assert_eq!(e.view().running_fillin.len(), 6);
        e.advance_to(11);
        assert_eq!(e.normal_starts(), &[(1, 10)]);
        assert!(e.view().running_fillin.is_empty());
        assert_eq!(e.preemptions(), 6);
    }

    #[test]
    fn fillin_on_empty_cluster_starts_at_once() {
        let mut e = Engine::new(&cluster(24, 1), &[], vec![]);
        let id = e.submit_fillin(4, 600, false);
        e.advance_to(0);
        e.advance_to(1);
        assert_eq!(e.view().running_fillin, vec![(id, 4, 0)]);
    }

    #[test]
    fn reservation_blocks_long_normal_but_not_short_fillin() {
        let res = [Reservation {
            start: 100,
            end: 200,
            kind: ReservationKind::Machine,
        }];
        let mut e = Engine::new(&cluster(24, 5), &res, vec![normal(1, 4, 60, 50)]);
        e.advance_to(50);
        let id = e.submit_fillin(4, 10, false);
        e.advance_to(51);
        assert!(e.normal_starts().is_empty());
        assert_eq!(e.view().running_fillin, vec![(id, 4, 50)]);
        // after the reservation the normal job gets its turn
        e.advance_to(201);
        assert_eq!(e.normal_starts(), &[(1, 200)]);
    }

    #[test]
    fn victims_are_largest_first() {
        let mut e = Engine::new(&cluster(16, 1), &[], vec![normal(1, 2, 100, 5)]);
        let small = e.submit_fillin(2, 1000, false);
        let big = e.submit_fillin(8, 1000, true);
        let mid = e.submit_fillin(6, 1000, false);
        e.advance_to(1);
        e.advance_to(6);
        let running: Vec<u64> = e.view().running_fillin.iter().map(|r| r.0).collect();
        assert_eq!(running, vec![small, mid]);
        // the requeued 8-unit job does not fit into the 6 units left over
        assert_eq!(e.free_units(), 6);
        assert_eq!(e.view().queued_fillin.len(), 1);
        assert_eq!(e.view().queued_fillin[0].0, big);
    }

    #[test]
    fn mask_reduces_capacity_in_samples() {
        let res = [Reservation {
            start: 0,
            end: 120,
            kind: ReservationKind::Mask { units: 4 },
        }];
        let mut e = Engine::new(&cluster(10, 4), &res, vec![]);
        e.run_to_end();
        let caps: Vec<u64> = e.trace().iter().map(|s| s.capacity).collect();
        assert_eq!(caps, vec![6, 6, 10, 10]);
    }

    #[test]
    fn job_cap_is_respected() {
        let mut c = cluster(100, 2);
        c.fillin_job_cap = Some(3);
        let mut e = Engine::new(&c, &[], vec![]);
        for _ in 0..10 {
            e.submit_fillin(1, 1000, false);
        }
        e.run_to_end();
        assert_eq!(e.max_running_fillin(), 3);
        assert_eq!(e.view().queued_fillin.len(), 7);
    }

    #[test]
    fn dispatch_latency_delays_starts() {
        let mut c = cluster(8, 3);
        c.dispatch_latency_s = 60;
        let mut e = Engine::new(&c, &[], vec![normal(1, 2, 600, 0)]);
        e.run_to_end();
        assert_eq!(e.normal_starts(), &[(1, 60)]);
        assert_eq!(e.trace()[0].normal_cores, 0);
        assert_eq!(e.trace()[1].normal_cores, 2);
    }
}
