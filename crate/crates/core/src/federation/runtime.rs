use std::collections::{BTreeMap, HashMap, VecDeque};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{mpsc, Mutex};
use std::time::{Duration, Instant};

use super::{
    elapsed_us, Context, Message, Outgoing, Party, PartyId, PartyState, PhaseTimings, ProtocolError, Recipient,
    Transcript,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExecMode {
    /// Single thread, global FIFO delivery. The reference order.
    #[default]
    Lockstep,
    /// One worker thread per party with blocking channels.
    Threaded,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    pub mode: ExecMode,
    /// Abort once more frames than this have been sent.
    pub max_messages: Option<usize>,
}

/// Parties to start, in order. Everything after the starts is driven by
/// message delivery.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Schedule {
    pub starts: Vec<PartyId>,
}

impl Schedule {
    pub fn start(party: PartyId) -> Self {
        Self { starts: vec![party] }
    }
}

struct Router {
    ids: Vec<PartyId>,
    index: HashMap<PartyId, usize>,
    limit: Option<usize>,
    sent: AtomicUsize,
    origin: Instant,
}

impl Router {
    fn new(parties: &[&mut dyn Party], limit: Option<usize>) -> Result<Self, ProtocolError> {
        let ids: Vec<PartyId> = parties.iter().map(|p| p.id()).collect();
        let mut index = HashMap::new();
        for (i, &id) in ids.iter().enumerate() {
            if index.insert(id, i).is_some() {
                return Err(ProtocolError::DuplicateParty(id));
            }
        }
        Ok(Self { ids, index, limit, sent: AtomicUsize::new(0), origin: Instant::now() })
    }

    fn index_of(&self, id: PartyId) -> Result<usize, ProtocolError> {
        self.index.get(&id).copied().ok_or(ProtocolError::UnknownParty(id))
    }

    /// Expands broadcasts, stamps sequence numbers and checks the budget.
    fn route(
        &self,
        sender: PartyId,
        seq: &mut u64,
        out: Vec<Outgoing>,
    ) -> Result<Vec<(usize, Message)>, ProtocolError> {
        let mut msgs = Vec::new();
        for o in out {
            let targets: Vec<PartyId> = match o.to {
                Recipient::Party(p) => vec![p],
                Recipient::Broadcast => self.ids.iter().copied().filter(|&p| p != sender).collect(),
            };
            for receiver in targets {
                let idx = self.index_of(receiver)?;
                let sent = self.sent.fetch_add(1, Ordering::SeqCst) + 1;
                if let Some(limit) = self.limit {
                    if sent > limit {
                        return Err(ProtocolError::BudgetExceeded { limit });
                    }
                }
                msgs.push((
                    idx,
                    Message {
                        seq: *seq,
                        sender,
                        receiver,
                        kind: o.kind,
                        payload: o.payload.clone(),
                        timestamp_us: elapsed_us(self.origin),
                    },
                ));
                *seq += 1;
            }
        }
        Ok(msgs)
    }
}

fn settle(ctx: &mut Context, started: Instant) -> (Vec<Outgoing>, PhaseTimings) {
    let busy = started.elapsed().as_secs_f64();
    let (out, mut phases) = ctx.take();
    phases.compute = (busy - phases.encrypt - phases.decrypt - phases.transfer).max(0.0);
    (out, phases)
}

fn deadlock_check(parties: &[&mut dyn Party]) -> Result<(), ProtocolError> {
    if parties.iter().any(|p| p.state() == PartyState::Waiting) {
        let dump = parties.iter().map(|p| format!("{}: {}", p.id(), p.describe())).collect::<Vec<_>>().join("; ");
        return Err(ProtocolError::Deadlock { dump });
    }
    Ok(())
}

/// Runs the parties to quiescence and returns the transcript.
///
/// Fails if a party returns an error, a frame targets an unregistered party,
/// the message budget is exceeded, or delivery stops while a party is still
/// waiting (deadlock).
pub fn run_protocol(
    parties: &mut [&mut dyn Party],
    schedule: &Schedule,
    opts: &RunOptions,
) -> Result<Transcript, ProtocolError> {
    let router = Router::new(parties, opts.max_messages)?;
    for &p in &schedule.starts {
        router.index_of(p)?;
    }
    match opts.mode {
        ExecMode::Lockstep => run_lockstep(parties, schedule, router),
        ExecMode::Threaded => run_threaded(parties, schedule, router),
    }
}

fn run_lockstep(
    parties: &mut [&mut dyn Party],
    schedule: &Schedule,
    router: Router,
) -> Result<Transcript, ProtocolError> {
    let mut seqs = vec![0u64; parties.len()];
    let mut per_party: BTreeMap<PartyId, PhaseTimings> = BTreeMap::new();
    let mut queue: VecDeque<(usize, Message)> = VecDeque::new();
    let mut log = Vec::new();

    let mut deliver = |idx: usize,
                       msg: Option<&Message>,
                       parties: &mut [&mut dyn Party],
                       queue: &mut VecDeque<(usize, Message)>,
                       log: &mut Vec<Message>|
     -> Result<(), ProtocolError> {
        let party = &mut parties[idx];
        let id = party.id();
        let mut ctx = Context::new(id);
        let started = Instant::now();
        match msg {
            None => party.start(&mut ctx)?,
            Some(m) => party.handle(m, &mut ctx)?,
        }
        let (out, phases) = settle(&mut ctx, started);
        per_party.entry(id).or_default().add(&phases);
        for (to, m) in router.route(id, &mut seqs[idx], out)? {
            log.push(m.clone());
            queue.push_back((to, m));
        }
        Ok(())
    };

    for &p in &schedule.starts {
        let idx = router.index_of(p)?;
        deliver(idx, None, parties, &mut queue, &mut log)?;
    }
    while let Some((idx, msg)) = queue.pop_front() {
        deliver(idx, Some(&msg), parties, &mut queue, &mut log)?;
    }
    deadlock_check(parties)?;
    Ok(finish(log, per_party, router.origin))
}

fn finish(messages: Vec<Message>, per_party: BTreeMap<PartyId, PhaseTimings>, origin: Instant) -> Transcript {
    let mut phases = PhaseTimings::default();
    for p in per_party.values() {
        phases.add(p);
    }
    Transcript { messages, phases, per_party, wall_seconds: origin.elapsed().as_secs_f64() }
}

fn run_threaded(
    parties: &mut [&mut dyn Party],
    schedule: &Schedule,
    router: Router,
) -> Result<Transcript, ProtocolError> {
    let n = parties.len();
    let (senders, receivers): (Vec<_>, Vec<_>) = (0..n).map(|_| mpsc::channel::<Message>()).unzip();
    let pending = AtomicUsize::new(0);
    let abort = AtomicBool::new(false);
    let failure: Mutex<Option<ProtocolError>> = Mutex::new(None);
    let log: Mutex<Vec<Message>> = Mutex::new(Vec::new());
    let timings: Mutex<BTreeMap<PartyId, PhaseTimings>> = Mutex::new(BTreeMap::new());
    let mut seqs = vec![0u64; n];

    let dispatch = |msgs: Vec<(usize, Message)>| {
        let mut log = log.lock().unwrap();
        for (to, m) in msgs {
            pending.fetch_add(1, Ordering::SeqCst);
            log.push(m.clone());
            senders[to].send(m).expect("receiver alive for the whole run");
        }
    };

    for &p in &schedule.starts {
        let idx = router.index_of(p)?;
        let party = &mut parties[idx];
        let mut ctx = Context::new(party.id());
        let started = Instant::now();
        party.start(&mut ctx)?;
        let (out, phases) = settle(&mut ctx, started);
        timings.lock().unwrap().entry(party.id()).or_default().add(&phases);
        dispatch(router.route(party.id(), &mut seqs[idx], out)?);
    }

    std::thread::scope(|scope| {
        for ((party, rx), seq) in parties.iter_mut().zip(receivers).zip(seqs.iter_mut()) {
            let (router, pending, abort, failure, timings, dispatch) =
                (&router, &pending, &abort, &failure, &timings, &dispatch);
            scope.spawn(move || {
                let id = party.id();
                let fail = |e: ProtocolError| {
                    failure.lock().unwrap().get_or_insert(e);
                    abort.store(true, Ordering::SeqCst);
                };
                while !abort.load(Ordering::SeqCst) {
                    match rx.recv_timeout(Duration::from_millis(1)) {
                        Ok(msg) => {
                            let mut ctx = Context::new(id);
                            let started = Instant::now();
                            let handled = party.handle(&msg, &mut ctx);
                            let (out, phases) = settle(&mut ctx, started);
                            timings.lock().unwrap().entry(id).or_default().add(&phases);
                            match handled.and_then(|_| router.route(id, seq, out)) {
                                Ok(msgs) => dispatch(msgs),
                                Err(e) => fail(e),
                            }
                            pending.fetch_sub(1, Ordering::SeqCst);
                        }
                        Err(mpsc::RecvTimeoutError::Timeout) => {
                            if pending.load(Ordering::SeqCst) == 0 {
                                break;
                            }
                        }
                        Err(mpsc::RecvTimeoutError::Disconnected) => break,
                    }
                }
            });
        }
    });

    if let Some(e) = failure.into_inner().unwrap() {
        return Err(e);
    }
    deadlock_check(parties)?;
    Ok(finish(log.into_inner().unwrap(), timings.into_inner().unwrap(), router.origin))
}
