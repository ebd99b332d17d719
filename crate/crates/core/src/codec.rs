//! Little-endian binary encoding used by checkpoints and the replay buffer.
//! Decoding never panics; every failure reports the byte offset.

use crate::env::{Action, Echo, Observation, ParseFailure, Parsed, RewardBreakdown, Termination, Verb};
use crate::error::{Error, Result};
use crate::policy::{Layout, PolicyParams, PolicyShape};
use crate::trajectory::{Origin, StepRecord, TokenStep, Trajectory};

#[derive(Default, Debug)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.bytes(&v.to_bits().to_le_bytes());
    }

    pub fn len(&mut self, n: usize) {
        self.u64(n as u64);
    }

    pub fn f64s(&mut self, v: &[f64]) {
        self.len(v.len());
        v.iter().for_each(|&x| self.f64(x));
    }
}

#[derive(Debug)]
pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn is_exhausted(&self) -> bool {
        self.pos == self.buf.len()
    }

    pub fn corrupt(&self, message: impl Into<String>) -> Error {
        Error::Corrupt {
            position: self.pos,
            message: message.into(),
        }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.corrupt(format!(
                "truncated: needed {n} bytes, {} remain",
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }

    /// A length prefix, sanity-checked against the remaining input assuming
    /// each element takes at least `min_elem` bytes.
    pub fn len(&mut self, min_elem: usize) -> Result<usize> {
        let at = self.pos;
        let n = self.u64()?;
        let remaining = (self.buf.len() - self.pos) as u64;
        if n.saturating_mul(min_elem.max(1) as u64) > remaining {
            return Err(Error::Corrupt {
                position: at,
                message: format!("length {n} exceeds remaining input"),
            });
        }
        Ok(n as usize)
    }

    pub fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len(8)?;
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn expect_end(&self) -> Result<()> {
        if self.is_exhausted() {
            Ok(())
        } else {
            Err(self.corrupt("trailing bytes"))
        }
    }
}

const NONE_ARG: u8 = u8::MAX;

fn put_action(w: &mut Writer, a: &Action) {
    w.u8(a.kind.index() as u8);
    w.u8(a.argument.unwrap_or(NONE_ARG));
}

fn get_action(r: &mut Reader<'_>) -> Result<Action> {
    let kind = r.u8()?;
    let kind = Verb::from_index(kind as usize).ok_or_else(|| r.corrupt(format!("bad verb {kind}")))?;
    let arg = r.u8()?;
    Ok(Action {
        kind,
        argument: (arg != NONE_ARG).then_some(arg),
    })
}

fn put_observation(w: &mut Writer, o: &Observation) {
    w.u32(o.step_index as u32);
    w.len(o.widget_states.len());
    w.bytes(&o.widget_states);
    match &o.last_action_echo {
        None => w.u8(0),
        Some(Echo::Malformed) => w.u8(1),
        Some(Echo::Action(a)) => {
            w.u8(2);
            put_action(w, a);
        }
    }
}

fn get_observation(r: &mut Reader<'_>) -> Result<Observation> {
    let step_index = r.u32()? as usize;
    let n = r.len(1)?;
    let widget_states = r.take(n)?.to_vec();
    let last_action_echo = match r.u8()? {
        0 => None,
        1 => Some(Echo::Malformed),
        2 => Some(Echo::Action(get_action(r)?)),
        t => return Err(r.corrupt(format!("bad echo tag {t}"))),
    };
    Ok(Observation {
        step_index,
        widget_states,
        last_action_echo,
    })
}

fn put_parsed(w: &mut Writer, p: &Parsed) {
    match p {
        Ok(a) => {
            w.u8(0);
            put_action(w, a);
        }
        Err(f) => {
            w.u8(1);
            w.u64(f.verb_token as u64);
            w.u64(f.arg_token as u64);
        }
    }
}

fn get_parsed(r: &mut Reader<'_>) -> Result<Parsed> {
    match r.u8()? {
        0 => Ok(Ok(get_action(r)?)),
        1 => Ok(Err(ParseFailure {
            verb_token: r.u64()? as usize,
            arg_token: r.u64()? as usize,
        })),
        t => Err(r.corrupt(format!("bad parse tag {t}"))),
    }
}

fn termination_tag(t: Termination) -> u8 {
    match t {
        Termination::Finish => 0,
        Termination::Fail => 1,
        Termination::CallUser => 2,
        Termination::StepCap => 3,
    }
}

pub fn put_trajectory(w: &mut Writer, t: &Trajectory) {
    w.u32(t.task_id);
    w.u64(t.seed);
    w.len(t.steps.len());
    for s in &t.steps {
        put_observation(w, &s.observation);
        w.u64(s.tokens.verb_token as u64);
        w.u64(s.tokens.arg_token as u64);
        s.tokens.logprob_behavior.iter().for_each(|&x| w.f64(x));
        s.tokens.logprob_untempered.iter().for_each(|&x| w.f64(x));
        w.f64(s.tokens.temperature);
        put_parsed(w, &s.parsed);
    }
    w.f64(t.reward.trajectory_reward);
    w.f64(t.reward.format_penalty_total);
    w.f64(t.reward.total);
    w.u8(termination_tag(t.termination));
    w.u64(t.token_count as u64);
    w.u8(match t.origin {
        Origin::Fresh => 0,
        Origin::Replayed => 1,
    });
    w.u64(t.behavior_version);
}

pub fn get_trajectory(r: &mut Reader<'_>) -> Result<Trajectory> {
    let task_id = r.u32()?;
    let seed = r.u64()?;
    let n = r.len(16)?;
    let mut steps = Vec::with_capacity(n);
    for _ in 0..n {
        let observation = get_observation(r)?;
        let verb_token = r.u64()? as usize;
        let arg_token = r.u64()? as usize;
        let logprob_behavior = [r.f64()?, r.f64()?];
        let logprob_untempered = [r.f64()?, r.f64()?];
        let temperature = r.f64()?;
        let parsed = get_parsed(r)?;
        steps.push(StepRecord {
            observation,
            tokens: TokenStep {
                verb_token,
                arg_token,
                logprob_behavior,
                logprob_untempered,
                temperature,
            },
            parsed,
        });
    }
    let reward = RewardBreakdown {
        trajectory_reward: r.f64()?,
        format_penalty_total: r.f64()?,
        total: r.f64()?,
    };
    let termination = match r.u8()? {
        0 => Termination::Finish,
        1 => Termination::Fail,
        2 => Termination::CallUser,
        3 => Termination::StepCap,
        t => return Err(r.corrupt(format!("bad termination tag {t}"))),
    };
    let token_count = r.u64()? as usize;
    if token_count != 2 * steps.len() {
        return Err(r.corrupt(format!(
            "token count {token_count} does not match {} steps",
            steps.len()
        )));
    }
    let origin = match r.u8()? {
        0 => Origin::Fresh,
        1 => Origin::Replayed,
        t => return Err(r.corrupt(format!("bad origin tag {t}"))),
    };
    let behavior_version = r.u64()?;
    Ok(Trajectory {
        task_id,
        seed,
        steps,
        reward,
        termination,
        token_count,
        origin,
        behavior_version,
    })
}

pub fn put_params(w: &mut Writer, p: &PolicyParams) {
    w.u64(p.shape.embed as u64);
    w.u64(p.shape.hidden as u64);
    w.u64(p.version);
    w.f64s(&p.data);
}

pub fn get_params(r: &mut Reader<'_>) -> Result<PolicyParams> {
    let embed = r.u64()?;
    let hidden = r.u64()?;
    if embed == 0 || hidden == 0 || embed > 4096 || hidden > 4096 {
        return Err(r.corrupt(format!("implausible policy shape {embed}x{hidden}")));
    }
    let shape = PolicyShape {
        embed: embed as usize,
        hidden: hidden as usize,
    };
    let version = r.u64()?;
    let data = r.f64s()?;
    let expected = Layout::new(shape).total;
    if data.len() != expected {
        return Err(r.corrupt(format!(
            "{} parameters for a shape that needs {expected}",
            data.len()
        )));
    }
    Ok(PolicyParams {
        shape,
        data,
        version,
    })
}
