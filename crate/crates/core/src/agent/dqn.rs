//! Double deep Q-learning: replay memory, targets, epsilon-greedy policy and
//! SGD-with-momentum updates.

use rand::Rng;

use super::net::ConvNet;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub terminal: bool,
}

/// Fixed-capacity ring buffer with uniform sampling.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer {
            capacity: capacity.max(1),
            items: Vec::new(),
            next: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    /// `n` indices drawn uniformly with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<&Transition> {
        if self.items.is_empty() {
            return Vec::new();
        }
        (0..n).map(|_| &self.items[rng.random_range(0..self.items.len())]).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DqnConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub replay_capacity: usize,
    pub target_sync: usize,
    pub discount: f64,
    pub eps_start: f64,
    pub eps_end: f64,
    /// Fraction of all steps over which epsilon decays linearly.
    pub eps_decay_fraction: f64,
    pub updates_per_step: usize,
    pub max_loss: f64,
}

impl Default for DqnConfig {
    fn default() -> Self {
        DqnConfig {
            learning_rate: 1e-3,
            momentum: 0.9,
            batch_size: 32,
            replay_capacity: 10_000,
            target_sync: 100,
            discount: 0.9,
            eps_start: 1.0,
            eps_end: 0.05,
            eps_decay_fraction: 0.6,
            updates_per_step: 4,
            max_loss: 1e6,
        }
    }
}

impl DqnConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.discount) {
            return Err(Error::config(format!("discount must lie in [0, 1), got {}", self.discount)));
        }
        if self.batch_size == 0 || self.target_sync == 0 {
            return Err(Error::config("batch_size and target_sync must be >= 1"));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("learning_rate must be positive and momentum in [0, 1)"));
        }
        Ok(())
    }

    /// Linear decay from `eps_start` to `eps_end` over the first
    /// `eps_decay_fraction` of `total` steps.
    pub fn epsilon(&self, step: usize, total: usize) -> f64 {
        let span = self.eps_decay_fraction * total as f64;
        if span <= 0.0 {
            return self.eps_end;
        }
        let f = (step as f64 / span).min(1.0);
        self.eps_start + (self.eps_end - self.eps_start) * f
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn greedy_action(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Standard target `r + γ max_a Q(s', a)` evaluated by a single network.
pub fn dqn_target(net: &ConvNet, reward: f64, next_obs: &[f64], discount: f64, terminal: bool) -> Result<f64> {
    if terminal {
        return Ok(reward);
    }
    let q = net.forward(next_obs)?;
    Ok(reward + discount * q[greedy_action(&q)])
}

/// Double-DQN target: the online net picks the next action, the target net
/// values it.
pub fn double_dqn_target(
    online: &ConvNet,
    target: &ConvNet,
    reward: f64,
    next_obs: &[f64],
    discount: f64,
    terminal: bool,
) -> Result<f64> {
    if terminal {
        return Ok(reward);
    }
    let a = greedy_action(&online.forward(next_obs)?);
    Ok(reward + discount * target.forward(next_obs)?[a])
}

/// One learner: online and target networks, momentum buffer and replay.
#[derive(Clone, Debug)]
pub struct DqnAgent {
    pub online: ConvNet,
    pub target: ConvNet,
    velocity: Vec<f64>,
    pub replay: ReplayBuffer,
    pub updates: usize,
    cfg: DqnConfig,
}

impl DqnAgent {
    pub fn new(net: ConvNet, cfg: DqnConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(DqnAgent {
            velocity: vec![0.0; net.param_count()],
            target: net.clone(),
            online: net,
            replay: ReplayBuffer::new(cfg.replay_capacity),
            updates: 0,
            cfg,
        })
    }

    pub fn act<R: Rng + ?Sized>(&self, obs: &[f64], epsilon: f64, rng: &mut R) -> Result<usize> {
        if epsilon > 0.0 && rng.random::<f64>() < epsilon {
            return Ok(rng.random_range(0..self.online.spec.outputs));
        }
        Ok(greedy_action(&self.online.forward(obs)?))
    }

    pub fn sync_target(&mut self) {
        self.target.params.copy_from_slice(&self.online.params);
    }

    /// One minibatch step; returns the mean squared TD error.
    pub fn update<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<f64> {
        let batch = self.replay.sample(self.cfg.batch_size, rng);
        if batch.is_empty() {
            return Ok(0.0);
        }
        let mut grad = vec![0.0; self.online.param_count()];
        let mut loss = 0.0;
        for t in &batch {
            let y = double_dqn_target(&self.online, &self.target, t.reward, &t.next_state, self.cfg.discount, t.terminal)?;
            let (l, g) = self.online.td_loss_grad(&t.state, t.action, y)?;
            loss += l;
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
        let n = batch.len() as f64;
        loss /= n;
        if !loss.is_finite() || loss > self.cfg.max_loss {
            return Err(Error::Divergence(format!(
                "TD loss {loss:.3e} after {} updates exceeds {:.0e}",
                self.updates, self.cfg.max_loss
            )));
        }
        for ((w, v), g) in self.online.params.iter_mut().zip(&mut self.velocity).zip(&grad) {
            *v = self.cfg.momentum * *v - self.cfg.learning_rate * g / n;
            *w += *v;
        }
        self.updates += 1;
        if self.updates.is_multiple_of(self.cfg.target_sync) {
            self.sync_target();
        }
        Ok(loss)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::net::NetSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn transition(i: usize) -> Transition {
        Transition {
            state: vec![i as f64],
            action: i % 5,
            reward: i as f64,
            next_state: vec![],
            terminal: true,
        }
    }

    #[test]
    fn replay_overwrites_oldest() {
        let mut r = ReplayBuffer::new(3);
        for i in 0..5 {
            r.push(transition(i));
        }
        let mut rewards: Vec<f64> = r.items.iter().map(|t| t.reward).collect();
        rewards.sort_by(f64::total_cmp);
        assert_eq!(rewards, vec![2.0, 3.0, 4.0]);
    }

    #[test]
    fn replay_sampling_is_seeded() {
        let mut r = ReplayBuffer::new(100);
        for i in 0..50 {
            r.push(transition(i));
        }
        let a: Vec<f64> = r.sample(32, &mut ChaCha8Rng::seed_from_u64(5)).iter().map(|t| t.reward).collect();
        let b: Vec<f64> = r.sample(32, &mut ChaCha8Rng::seed_from_u64(5)).iter().map(|t| t.reward).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn epsilon_schedule() {
        let c = DqnConfig::default();
        assert_eq!(c.epsilon(0, 100), 1.0);
        assert!((c.epsilon(30, 100) - 0.525).abs() < 1e-12);
        assert!((c.epsilon(60, 100) - 0.05).abs() < 1e-12);
        assert!((c.epsilon(99, 100) - 0.05).abs() < 1e-12);
    }

    #[test]
    fn argmax_ignores_uniform_shift() {
        let q = [0.3, -1.0, 0.9, 0.9, 0.1];
        assert_eq!(greedy_action(&q), 2);
        let shifted: Vec<f64> = q.iter().map(|v| v + 17.5).collect();
        assert_eq!(greedy_action(&shifted), 2);
    }

    #[test]
    fn zero_epsilon_is_greedy_and_terminal_target_is_reward() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = ConvNet::he_init(NetSpec::planar(1, 8, 5), &mut rng).unwrap();
        let obs: Vec<f64> = (0..64).map(|i| (i as f64 * 0.37).sin()).collect();
        let agent = DqnAgent::new(net.clone(), DqnConfig::default()).unwrap();
        let expect = greedy_action(&net.forward(&obs).unwrap());
        for seed in 0..5 {
            assert_eq!(agent.act(&obs, 0.0, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap(), expect);
        }
        assert_eq!(double_dqn_target(&net, &net, 0.7, &obs, 0.9, true).unwrap(), 0.7);
    }

    #[test]
    fn sync_copies_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = ConvNet::he_init(NetSpec::planar(1, 8, 5), &mut rng).unwrap();
        let mut agent = DqnAgent::new(net, DqnConfig { learning_rate: 0.1, ..Default::default() }).unwrap();
        for i in 0..10 {
            agent.replay.push(Transition {
                state: vec![0.1 * i as f64; 64],
                action: i % 5,
                reward: 1.0,
                next_state: vec![0.0; 64],
                terminal: false,
            });
        }
        agent.update(&mut rng).unwrap();
        assert_ne!(agent.online.params, agent.target.params);
        agent.sync_target();
        assert_eq!(agent.online.params, agent.target.params);
    }
}
