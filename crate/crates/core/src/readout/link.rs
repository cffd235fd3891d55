use super::{EventWord, ReadoutError};

#[derive(Debug, Clone, PartialEq)]
pub struct LinkConfig {
    /// Buffer capacity in words.
    pub depth: usize,
    /// Link throughput in bytes per second.
    pub link_rate: u64,
    pub word_size: u64,
    /// Simulation step in ps.
    pub tick_ps: u64,
    /// Keep draining after the last arrival until the buffer is empty.
    pub flush: bool,
}

impl Default for LinkConfig {
    fn default() -> Self {
        Self {
            depth: 4096,
            link_rate: 35_000_000,
            word_size: 8,
            tick_ps: 1_000_000,
            flush: true,
        }
    }
}

impl LinkConfig {
    /// Sustained drain capacity in words per second.
    pub fn max_word_rate(&self) -> f64 {
        self.link_rate as f64 / self.word_size as f64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ReadoutBuffer {
    pub depth: usize,
    pub occupancy: usize,
    pub drops: u64,
    pub drained_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StreamOutcome {
    pub buffer: ReadoutBuffer,
    pub enqueued: u64,
    pub delivered: Vec<EventWord>,
    /// Tick at which each delivered word left the buffer.
    pub delivery_tick: Vec<u64>,
    /// Number of ticks simulated.
    pub ticks: u64,
}

impl StreamOutcome {
    /// `enqueued == delivered + residual occupancy`; drops never entered.
    pub fn is_conserved(&self, offered: u64) -> bool {
        offered == self.enqueued + self.buffer.drops
            && self.enqueued == self.delivered.len() as u64 + self.buffer.occupancy as u64
    }
}

/// Discrete-time simulation of the readout FIFO and link.
///
/// `arrivals` are `(time_ps, word)` pairs in time order. Each tick first
/// enqueues that tick's arrivals (dropping whatever does not fit), then
/// drains as many whole words as the link credit allows. Credit accrues at
/// `link_rate * tick` bytes per tick; an idle link keeps less than one word
/// of it, so the delivered count never exceeds `link_rate / word_size` words
/// per second.
pub fn stream(arrivals: &[(f64, EventWord)], cfg: &LinkConfig) -> Result<StreamOutcome, ReadoutError> {
    if cfg.depth == 0 || cfg.word_size == 0 || cfg.tick_ps == 0 || cfg.link_rate == 0 {
        return Err(ReadoutError::InvalidParameter(format!("link config {cfg:?}")));
    }
    if let Some(i) = arrivals.windows(2).position(|w| w[1].0 < w[0].0) {
        return Err(ReadoutError::InvalidParameter(format!("arrival {} is out of time order", i + 1)));
    }
    if arrivals.iter().any(|a| !(a.0.is_finite() && a.0 >= 0.0)) {
        return Err(ReadoutError::InvalidParameter("arrival times must be finite and >= 0".into()));
    }
    // Credit is kept in byte-picoseconds per second so that it stays integral.
    let per_tick = cfg.link_rate as u128 * cfg.tick_ps as u128;
    let word_cost = cfg.word_size as u128 * 1_000_000_000_000u128;
    let mut out = StreamOutcome {
        buffer: ReadoutBuffer { depth: cfg.depth, ..Default::default() },
        ..Default::default()
    };
    let mut queue = std::collections::VecDeque::with_capacity(cfg.depth.min(arrivals.len()));
    let mut credit: u128 = 0;
    let mut next = 0usize;
    let mut tick: u64 = arrivals.first().map_or(0, |a| (a.0 / cfg.tick_ps as f64) as u64);
    loop {
        while next < arrivals.len() && (arrivals[next].0 / cfg.tick_ps as f64) as u64 <= tick {
            if queue.len() < cfg.depth {
                queue.push_back(arrivals[next].1);
                out.enqueued += 1;
            } else {
                out.buffer.drops += 1;
            }
            next += 1;
        }
        credit += per_tick;
        while credit >= word_cost {
            let Some(w) = queue.pop_front() else { break };
            credit -= word_cost;
            out.delivered.push(w);
            out.delivery_tick.push(tick);
            out.buffer.drained_bytes += cfg.word_size;
        }
        if queue.is_empty() {
            credit = credit.min(word_cost - 1);
        }
        out.ticks += 1;
        if next == arrivals.len() && (queue.is_empty() || !cfg.flush) {
            break;
        }
        tick += 1;
        if queue.is_empty() && next < arrivals.len() {
            // Idle until the next arrival; credit is already capped.
            let t_next = (arrivals[next].0 / cfg.tick_ps as f64) as u64;
            if t_next > tick {
                out.ticks += t_next - tick;
                tick = t_next;
            }
        }
    }
    out.buffer.occupancy = queue.len();
    Ok(out)
}
