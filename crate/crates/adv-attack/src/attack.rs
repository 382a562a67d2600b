use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use face_embedder::{is_match, Embedder, MatcherConfig};
use tensor_core::{BoundParams, Image, Tape, Tensor, Var};
use watermark_codec::{Codec, Message, RelaxedMessage};

use crate::constraints::{project_delta, ConstraintReport};
use crate::AttackError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageInit {
    UniformRandom,
    AllHalf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    /// l-infinity budget on the perturbation, in unit pixel scale.
    pub epsilon: f64,
    /// Inner steps per variable and round (T).
    pub steps: usize,
    /// Outer alternation rounds (K).
    pub rounds: usize,
    pub message_init: MessageInit,
    /// Round the relaxed message after every outer round, so each perturbation
    /// round works against the binary message that will be embedded. When off,
    /// the message is rounded once after the last round.
    pub round_each_round: bool,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            epsilon: 4.0 / 255.0,
            steps: 10,
            rounds: 6,
            message_init: MessageInit::UniformRandom,
            round_each_round: true,
            seed: 0,
        }
    }
}

impl AttackConfig {
    /// Perturbation step size, epsilon / T.
    pub fn alpha(&self) -> f64 {
        self.epsilon / self.steps as f64
    }

    /// Message step size, 1 / T.
    pub fn beta(&self) -> f64 {
        1.0 / self.steps as f64
    }

    pub fn validate(&self) -> Result<(), AttackError> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(AttackError::Invalid(format!("epsilon {} must be finite and >= 0", self.epsilon)));
        }
        if self.steps == 0 || self.rounds == 0 {
            return Err(AttackError::Invalid("steps and rounds must be at least 1".into()));
        }
        Ok(())
    }
}

/// The codec and embedder under attack.
#[derive(Clone, Copy)]
pub struct Models<'a> {
    pub codec: &'a Codec,
    pub embedder: &'a Embedder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    #[serde(skip)]
    pub delta: Option<Image>,
    pub message: Message,
    /// Rounded starting message, kept for the message-only comparison.
    pub initial_message: Message,
    pub s_pre_clean: f64,
    pub s_pre_adv: f64,
    pub s_post_adv: f64,
    /// Similarity after watermarking the perturbed probe with `initial_message`.
    pub s_post_initial: f64,
    pub match_pre: bool,
    pub match_post: bool,
    pub delta_linf: f64,
    pub loss_trace: Vec<f64>,
    pub constraints: ConstraintReport,
}

/// Tape handles shared by every objective evaluation.
struct Graph<'a> {
    models: Models<'a>,
    codec_p: BoundParams,
    emb_p: BoundParams,
    probe: Var,
    zr: Var,
}

impl<'a> Graph<'a> {
    fn new(tape: &mut Tape, models: Models<'a>, probe: &Tensor, zr: &Tensor) -> Self {
        let codec_p = models.codec.bind(tape, false);
        let emb_p = models.embedder.bind(tape, false);
        let probe = tape.constant(probe.clone());
        let zr = tape.constant(zr.clone());
        Graph {
            models,
            codec_p,
            emb_p,
            probe,
            zr,
        }
    }

    fn perturbed(&self, tape: &mut Tape, delta: Var) -> Result<Var, AttackError> {
        let x = tape.add(self.probe, delta)?;
        Ok(tape.clamp(x, 0.0, 1.0)?)
    }

    fn sim(&self, tape: &mut Tape, x: Var) -> Result<Var, AttackError> {
        let z = self.models.embedder.embed_var(tape, &self.emb_p, x)?;
        Ok(tape.cosine_similarity(z, self.zr)?)
    }

    fn post(&self, tape: &mut Tape, xp: Var, m: Var) -> Result<Var, AttackError> {
        let xw = self.models.codec.embed_var(tape, &self.codec_p, xp, m)?;
        self.sim(tape, xw)
    }

    /// `-s(h(I_p'), z_r) + s(h(f(I_p', m)), z_r)` with its two terms.
    fn loss(&self, tape: &mut Tape, delta: Var, m: Var) -> Result<(Var, Var, Var), AttackError> {
        let xp = self.perturbed(tape, delta)?;
        let pre = self.sim(tape, xp)?;
        let post = self.post(tape, xp, m)?;
        let neg = tape.scale(pre, -1.0);
        Ok((tape.add(neg, post)?, pre, post))
    }
}

/// The attack objective built on a caller's tape, with both models held
/// fixed. `probe` is N x 3 x H x W, `zr` is 1 x D, `m` is 1 x L.
pub fn attack_loss_var(
    tape: &mut Tape,
    models: Models,
    probe: Var,
    zr: Var,
    delta: Var,
    m: Var,
) -> Result<Var, AttackError> {
    let g = Graph {
        models,
        codec_p: models.codec.bind(tape, false),
        emb_p: models.embedder.bind(tape, false),
        probe,
        zr,
    };
    Ok(g.loss(tape, delta, m)?.0)
}

fn message_tensor(values: &[f64]) -> Tensor {
    Tensor::new(vec![1, values.len()], values.to_vec()).expect("message shape")
}

fn reference_embedding(zr: &[f64]) -> Tensor {
    Tensor::new(vec![1, zr.len()], zr.to_vec()).expect("embedding shape")
}

fn check_inputs(models: &Models, probe: &Image, zr: &[f64], m_len: usize) -> Result<(), AttackError> {
    probe.check_unit_range("attack")?;
    if zr.len() != models.embedder.config().embedding_dim {
        return Err(AttackError::Invalid(format!(
            "reference embedding has {} values, embedder produces {}",
            zr.len(),
            models.embedder.config().embedding_dim
        )));
    }
    if m_len != models.codec.message_bits() {
        return Err(AttackError::Invalid(format!(
            "message has {m_len} values, codec expects {}",
            models.codec.message_bits()
        )));
    }
    Ok(())
}

/// Attack objective `-s(h(x + d), z_r) + s(h(f(x + d, m)), z_r)` for a perturbation and relaxed message.
pub fn attack_loss(
    delta: &Tensor,
    m: &RelaxedMessage,
    probe: &Image,
    zr: &[f64],
    models: Models,
) -> Result<f64, AttackError> {
    check_inputs(&models, probe, zr, m.len())?;
    let pt = probe.to_tensor();
    if delta.shape() != pt.shape() {
        return Err(tensor_core::TensorError::ShapeMismatch {
            op: "attack_loss",
            left: delta.shape().to_vec(),
            right: pt.shape().to_vec(),
        }
        .into());
    }
    let mut tape = Tape::new();
    let g = Graph::new(&mut tape, models, &pt, &reference_embedding(zr));
    let d = tape.constant(delta.clone());
    let mv = tape.constant(message_tensor(m.values()));
    let (loss, _, _) = g.loss(&mut tape, d, mv)?;
    Ok(tape.value(loss).item()?)
}

fn finite(v: f64, stage: &'static str, trace: &[f64]) -> Result<f64, AttackError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(AttackError::NonFinite {
            stage,
            trace: trace.to_vec(),
        })
    }
}

/// T signed-gradient steps on the perturbation with the message held fixed.
/// Each step is projected onto the epsilon ball and the pixel box.
#[allow(clippy::too_many_arguments)]
pub fn pgd_delta_round(
    delta: &Tensor,
    m: &RelaxedMessage,
    probe: &Image,
    zr: &[f64],
    models: Models,
    config: &AttackConfig,
    report: &mut ConstraintReport,
    trace: &mut Vec<f64>,
) -> Result<Tensor, AttackError> {
    config.validate()?;
    check_inputs(&models, probe, zr, m.len())?;
    let pt = probe.to_tensor();
    let zt = reference_embedding(zr);
    let mut delta = delta.clone();
    let (eps, alpha) = (config.epsilon, config.alpha());
    for _ in 0..config.steps {
        let mut tape = Tape::new();
        let g = Graph::new(&mut tape, models, &pt, &zt);
        let d = tape.leaf(delta.clone().with_grad(true));
        let mv = tape.constant(message_tensor(m.values()));
        let (loss, _, _) = g.loss(&mut tape, d, mv)?;
        finite(tape.value(loss).item()?, "delta step", trace)?;
        trace.push(tape.value(loss).item()?);
        let grads = tape.backward(loss)?;
        let gd = grads.get(d).expect("delta leaf gradient");
        for ((di, &gi), &pi) in delta.data_mut().iter_mut().zip(gd.data()).zip(pt.data()) {
            let step = if gi > 0.0 {
                alpha
            } else if gi < 0.0 {
                -alpha
            } else {
                0.0
            };
            *di = project_delta(*di - step, pi, eps);
        }
        report.check_delta(&delta, &pt, eps);
    }
    Ok(delta)
}

/// T projected raw-gradient steps on the relaxed message with the
/// perturbation held fixed.
#[allow(clippy::too_many_arguments)]
pub fn message_round(
    m: &RelaxedMessage,
    delta: &Tensor,
    probe: &Image,
    zr: &[f64],
    models: Models,
    config: &AttackConfig,
    report: &mut ConstraintReport,
    trace: &mut Vec<f64>,
) -> Result<RelaxedMessage, AttackError> {
    config.validate()?;
    check_inputs(&models, probe, zr, m.len())?;
    let pt = probe.to_tensor();
    let zt = reference_embedding(zr);
    let beta = config.beta();
    // The pre-watermark term does not depend on m; evaluate it once.
    let pre = {
        let mut tape = Tape::new();
        let g = Graph::new(&mut tape, models, &pt, &zt);
        let d = tape.constant(delta.clone());
        let xp = g.perturbed(&mut tape, d)?;
        let s = g.sim(&mut tape, xp)?;
        tape.value(s).item()?
    };
    let mut values = m.values().to_vec();
    for _ in 0..config.steps {
        let mut tape = Tape::new();
        let g = Graph::new(&mut tape, models, &pt, &zt);
        let d = tape.constant(delta.clone());
        let mv = tape.leaf(message_tensor(&values).with_grad(true));
        let xp = g.perturbed(&mut tape, d)?;
        let post = g.post(&mut tape, xp, mv)?;
        let loss = tape.add_scalar(post, -pre);
        finite(tape.value(loss).item()?, "message step", trace)?;
        trace.push(tape.value(loss).item()?);
        let grads = tape.backward(loss)?;
        let gm = grads.get(mv).expect("message leaf gradient");
        for (v, gi) in values.iter_mut().zip(gm.data()) {
            *v = (*v - beta * gi).clamp(0.0, 1.0);
        }
        report.check_relaxed(&values);
    }
    Ok(RelaxedMessage::projected(values))
}

/// Rounds the relaxed message: values >= 0.5 become 1.
pub fn round_message(m: &RelaxedMessage) -> Message {
    m.round()
}

fn initial_message(config: &AttackConfig, len: usize) -> RelaxedMessage {
    match config.message_init {
        MessageInit::AllHalf => RelaxedMessage::projected(vec![0.5; len]),
        MessageInit::UniformRandom => {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            RelaxedMessage::projected((0..len).map(|_| rng.random::<f64>()).collect())
        }
    }
}

/// Similarity of the reference to `h(x)` and to `h(f(x, m))`.
fn similarities(x: &Image, m: &Message, zr: &[f64], models: Models) -> Result<(f64, f64), AttackError> {
    let mut tape = Tape::new();
    let g = Graph::new(&mut tape, models, &x.to_tensor(), &reference_embedding(zr));
    let xv = g.probe;
    let pre = g.sim(&mut tape, xv)?;
    let mv = tape.constant(message_tensor(&m.to_f64()));
    let post = g.post(&mut tape, xv, mv)?;
    Ok((tape.value(pre).item()?, tape.value(post).item()?))
}

fn apply_delta(probe: &Image, delta: &Tensor) -> Result<Image, AttackError> {
    let mut t = probe.to_tensor();
    for (x, d) in t.data_mut().iter_mut().zip(delta.data()) {
        *x = (*x + d).clamp(0.0, 1.0);
    }
    Ok(Image::from_tensor(&t)?)
}

/// Alternates perturbation and message rounds, rounds the message, and
/// scores the pair before and after watermarking.
pub fn adversarial_watermark_attack(
    probe: &Image,
    reference: &Image,
    models: Models,
    config: &AttackConfig,
    matcher: &MatcherConfig,
) -> Result<AttackResult, AttackError> {
    config.validate()?;
    let zr = models.embedder.embed_face(reference)?;
    attack_with_reference(probe, &zr, models, config, matcher)
}

/// As [`adversarial_watermark_attack`] with a precomputed reference embedding.
pub fn attack_with_reference(
    probe: &Image,
    zr: &[f64],
    models: Models,
    config: &AttackConfig,
    matcher: &MatcherConfig,
) -> Result<AttackResult, AttackError> {
    config.validate()?;
    let l = models.codec.message_bits();
    check_inputs(&models, probe, zr, l)?;
    let mut report = ConstraintReport::default();
    let mut trace = Vec::new();
    let init = initial_message(config, l);
    let mut m = init.clone();
    let mut delta = Tensor::zeros(probe.to_tensor().shape());
    for _ in 0..config.rounds {
        // With a zero budget every step projects back to zero.
        if config.epsilon > 0.0 {
            delta = pgd_delta_round(&delta, &m, probe, zr, models, config, &mut report, &mut trace)?;
        }
        m = message_round(&m, &delta, probe, zr, models, config, &mut report, &mut trace)?;
        if config.round_each_round {
            m = RelaxedMessage::from(&m.round());
        }
    }
    let message = round_message(&m);
    report.check_final(&message);
    let initial_message = init.round();

    let perturbed = apply_delta(probe, &delta)?;
    let s_pre_clean = face_embedder::similarity(&models.embedder.embed_face(probe)?, zr)?;
    let (s_pre_adv, s_post_adv) = similarities(&perturbed, &message, zr, models)?;
    let (_, s_post_initial) = similarities(&perturbed, &initial_message, zr, models)?;
    for v in [s_pre_clean, s_pre_adv, s_post_adv, s_post_initial] {
        finite(v, "final scoring", &trace)?;
    }
    Ok(AttackResult {
        delta_linf: delta.max_abs(),
        delta: Some(Image::from_tensor(&delta)?),
        message,
        initial_message,
        s_pre_clean,
        s_pre_adv,
        s_post_adv,
        s_post_initial,
        match_pre: is_match(s_pre_adv, matcher),
        match_post: is_match(s_post_adv, matcher),
        loss_trace: trace,
        constraints: report,
    })
}

/// Exhaustive search over all 2^L binary messages of the post-watermark
/// similarity for a fixed perturbed probe. Returns the first minimiser in
/// lexicographic order and its similarity.
pub fn brute_force_message_oracle(
    perturbed_probe: &Image,
    zr: &[f64],
    models: Models,
) -> Result<(Message, f64), AttackError> {
    let l = models.codec.message_bits();
    if l > 12 {
        return Err(AttackError::Invalid(format!("oracle supports L <= 12, got {l}")));
    }
    check_inputs(&models, perturbed_probe, zr, l)?;
    let mut best: Option<(Message, f64)> = None;
    for idx in 0..(1u64 << l) {
        let m = Message::from_index(idx, l)?;
        let (_, post) = similarities(perturbed_probe, &m, zr, models)?;
        if best.as_ref().is_none_or(|(_, b)| post < *b) {
            best = Some((m, post));
        }
    }
    Ok(best.expect("at least one candidate"))
}

/// Post-watermark similarity of a fixed perturbed probe for one message.
pub fn post_similarity(perturbed_probe: &Image, m: &Message, zr: &[f64], models: Models) -> Result<f64, AttackError> {
    check_inputs(&models, perturbed_probe, zr, m.len())?;
    Ok(similarities(perturbed_probe, m, zr, models)?.1)
}

/// Probe with the perturbation applied and clamped to the pixel box.
pub fn perturbed_probe(probe: &Image, delta: &Image) -> Result<Image, AttackError> {
    apply_delta(probe, &delta.to_tensor())
}
