use super::{Capacitor, CostModel, PowerTrace};

/// Longest single integration step, seconds.
pub const MAX_STEP_S: f64 = 1.0;

/// A capacitor fed by a trace and drained by the cost model. Time is local:
/// `now() == 0` corresponds to `trace_offset` on the trace.
#[derive(Debug, Clone)]
pub struct Device<'a> {
    pub cap: Capacitor,
    pub cost: CostModel,
    trace: &'a PowerTrace,
    trace_offset: f64,
    now: f64,
}

impl<'a> Device<'a> {
    pub fn new(cap: Capacitor, cost: CostModel, trace: &'a PowerTrace, trace_offset: f64) -> Self {
        Self {
            cap,
            cost,
            trace,
            trace_offset,
            now: 0.0,
        }
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn harvest_power(&self) -> f64 {
        self.trace.power_at(self.trace_offset + self.now)
    }

    /// Sleeps (or sits dark when off) until local time `t`.
    pub fn advance_to(&mut self, t: f64) {
        self.run_for(t - self.now, None);
    }

    /// Integrates for `duration` with the device awake at `active_w` if
    /// given, otherwise asleep. An off device draws nothing.
    fn run_for(&mut self, duration: f64, active_w: Option<f64>) {
        let end = self.now + duration.max(0.0);
        while self.now < end {
            let abs = self.trace_offset + self.now;
            // stop at the next trace breakpoint so each step sees one power level
            let next_break = self.trace.times.partition_point(|&x| x <= abs);
            let until_break = self
                .trace
                .times
                .get(next_break)
                .map_or(f64::INFINITY, |&b| b - abs);
            let dt = (end - self.now).min(MAX_STEP_S).min(until_break);
            let load = if self.cap.is_on() {
                active_w.unwrap_or(self.cost.sleep_power_w)
            } else {
                0.0
            };
            self.cap.step(self.harvest_power(), load, dt);
            self.now += dt;
        }
    }

    /// Executes `macs` worth of inference plus `extra_j` (e.g. retraining).
    /// Returns `false` on brown-out, in which case the usable reserve is gone.
    pub fn execute(&mut self, macs: u64, extra_j: f64) -> bool {
        let ok = self.cap.draw(self.cost.inference_cost(macs) + extra_j);
        let busy = self.cost.inference_time(macs);
        if ok && busy > 0.0 {
            self.run_for(busy, Some(self.cost.active_idle_power_w));
        }
        ok
    }
}
