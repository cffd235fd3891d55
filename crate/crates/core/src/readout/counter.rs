use crate::tdc::RawHit;

use super::ReadoutError;

#[derive(Debug, Clone, PartialEq)]
pub struct CounterConfig {
    /// Gate length in ps; gate `g` covers `[g * gate_length, (g + 1) * gate_length)`.
    pub gate_length: f64,
    pub n_gates: usize,
    pub n_channels: usize,
    pub dead_time: f64,
    /// Optional aggregate cap in counts per second across all channels.
    pub rate_cap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CounterBank {
    pub gate_length: f64,
    /// `counts[channel][gate]`.
    pub counts: Vec<Vec<u64>>,
    pub dead_time_suppressed: u64,
    /// Hits beyond the aggregate cap of their gate.
    pub saturated: u64,
    /// Hits after the last gate or on channels outside the bank.
    pub out_of_range: u64,
}

impl CounterBank {
    pub fn channel_total(&self, channel: usize) -> u64 {
        self.counts.get(channel).map_or(0, |c| c.iter().sum())
    }

    pub fn gate_total(&self, gate: usize) -> u64 {
        self.counts.iter().map(|c| c[gate]).sum()
    }
}

/// Multi-channel gated counter.
///
/// Hits are gated by the same per-channel dead time as the TDC and counted
/// directly, without passing through the event-word link. Hits must be in
/// time order per channel.
pub fn count_gated<I>(hits: I, cfg: &CounterConfig) -> Result<CounterBank, ReadoutError>
where
    I: IntoIterator<Item = RawHit>,
{
    if !(cfg.gate_length > 0.0) || cfg.n_gates == 0 || cfg.n_channels == 0 {
        return Err(ReadoutError::InvalidParameter(format!("counter config {cfg:?}")));
    }
    let cap = cfg.rate_cap.map(|r| (r * cfg.gate_length * 1e-12).floor() as u64);
    let mut bank = CounterBank {
        gate_length: cfg.gate_length,
        counts: vec![vec![0; cfg.n_gates]; cfg.n_channels],
        ..Default::default()
    };
    let mut gate_totals = vec![0u64; cfg.n_gates];
    let mut last: Vec<Option<f64>> = vec![None; cfg.n_channels];
    for hit in hits {
        let ch = hit.channel.index();
        let gate = (hit.true_time / cfg.gate_length).floor();
        if ch >= cfg.n_channels || !(gate >= 0.0 && gate < cfg.n_gates as f64) {
            bank.out_of_range += 1;
            continue;
        }
        if last[ch].is_some_and(|l| hit.true_time - l < cfg.dead_time) {
            bank.dead_time_suppressed += 1;
            continue;
        }
        last[ch] = Some(hit.true_time);
        let g = gate as usize;
        if cap.is_some_and(|c| gate_totals[g] >= c) {
            bank.saturated += 1;
            continue;
        }
        gate_totals[g] += 1;
        bank.counts[ch][g] += 1;
    }
    Ok(bank)
}

/// `count` hits on one channel at `start + k * period`.
#[derive(Debug, Clone)]
pub struct PeriodicHits {
    pub channel: crate::tdc::ChannelId,
    pub start: f64,
    pub period: f64,
    pub count: u64,
    k: u64,
}

impl PeriodicHits {
    pub fn new(channel: crate::tdc::ChannelId, start: f64, period: f64, count: u64) -> Self {
        Self { channel, start, period, count, k: 0 }
    }

    /// Hits covering `[start, start + duration)`.
    pub fn over(channel: crate::tdc::ChannelId, start: f64, period: f64, duration: f64) -> Self {
        Self::new(channel, start, period, (duration / period).ceil() as u64)
    }
}

impl Iterator for PeriodicHits {
    type Item = RawHit;

    fn next(&mut self) -> Option<RawHit> {
        if self.k >= self.count {
            return None;
        }
        let t = self.start + self.k as f64 * self.period;
        self.k += 1;
        Some(RawHit { channel: self.channel, true_time: t })
    }
}
