/// Dual averaging of the log step size toward a target acceptance statistic.
#[derive(Debug, Clone)]
pub(crate) struct DualAveraging {
    mu: f64,
    target: f64,
    counter: f64,
    s_bar: f64,
    x_bar: f64,
}

const GAMMA: f64 = 0.1;
const T0: f64 = 10.0;
const KAPPA: f64 = 0.75;

impl DualAveraging {
    pub fn new(step_size: f64, target: f64) -> Self {
        Self {
            mu: (10.0 * step_size).ln(),
            target,
            counter: 0.0,
            s_bar: 0.0,
            x_bar: 0.0,
        }
    }

    /// Records one acceptance statistic and returns the next step size.
    pub fn update(&mut self, accept_stat: f64) -> f64 {
        let a = if accept_stat.is_nan() { 0.0 } else { accept_stat.min(1.0) };
        self.counter += 1.0;
        let eta = 1.0 / (self.counter + T0);
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.target - a);
        let x = self.mu - self.s_bar * self.counter.sqrt() / GAMMA;
        let w = self.counter.powf(-KAPPA);
        self.x_bar = (1.0 - w) * self.x_bar + w * x;
        x.exp()
    }

    /// Final averaged step size.
    pub fn final_step_size(&self) -> f64 {
        self.x_bar.exp()
    }
}

/// Running mean and variance per coordinate.
#[derive(Debug, Clone)]
pub(crate) struct Welford {
    n: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    pub fn new(dim: usize) -> Self {
        Self {
            n: 0.0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    pub fn add(&mut self, x: &[f64]) {
        self.n += 1.0;
        for ((m, s), v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x) {
            let d = v - *m;
            *m += d / self.n;
            *s += d * (v - *m);
        }
    }

    pub fn count(&self) -> usize {
        self.n as usize
    }

    /// Sample variance shrunk toward 1e-3, as used for the diagonal metric.
    pub fn regularized_variance(&self) -> Vec<f64> {
        let n = self.n;
        self.m2
            .iter()
            .map(|s| {
                let var = if n > 1.0 { s / (n - 1.0) } else { 1.0 };
                (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
            })
            .collect()
    }
}

/// Warmup schedule: a fast initial buffer, doubling slow windows that estimate
/// the metric, and a fast terminal buffer.
#[derive(Debug, Clone)]
pub(crate) struct WindowSchedule {
    n_warmup: usize,
    init_buffer: usize,
    term_buffer: usize,
    window_size: usize,
    window_end: usize,
    adapt_metric: bool,
}

impl WindowSchedule {
    pub fn new(n_warmup: usize) -> Self {
        let (mut init, mut term, mut base) = (75, 50, 25);
        let adapt_metric = n_warmup >= 20;
        if init + term + base > n_warmup {
            init = (0.15 * n_warmup as f64) as usize;
            term = (0.1 * n_warmup as f64) as usize;
            base = n_warmup.saturating_sub(init + term);
        }
        let mut s = Self {
            n_warmup,
            init_buffer: init,
            term_buffer: term,
            window_size: base,
            window_end: 0,
            adapt_metric,
        };
        s.window_end = s.compute_window_end(init, base);
        s
    }

    fn compute_window_end(&self, start: usize, size: usize) -> usize {
        let end = start + size;
        let next_end = end + 2 * size;
        let slow_end = self.n_warmup - self.term_buffer;
        if next_end > slow_end {
            slow_end
        } else {
            end
        }
    }

    /// Whether iteration `i` (0-based) falls in a slow window.
    pub fn in_slow_window(&self, i: usize) -> bool {
        self.adapt_metric && i >= self.init_buffer && i < self.n_warmup - self.term_buffer
    }

    /// Whether iteration `i` closes a slow window. Advances the schedule when it does.
    pub fn end_of_window(&mut self, i: usize) -> bool {
        if !self.adapt_metric || i + 1 != self.window_end {
            return false;
        }
        let slow_end = self.n_warmup - self.term_buffer;
        if self.window_end < slow_end {
            self.window_size *= 2;
            self.window_end = self.compute_window_end(self.window_end, self.window_size);
        }
        true
    }
}
