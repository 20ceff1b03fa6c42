use huddle_core::coordinator::{Coordinator, CoordinatorSettings};
use huddle_core::domain::{Action, Payload, Proposal, SessionId};
use huddle_core::Rational;
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};

fn r(n: i64, d: i64) -> Rational {
    Rational::new(n, d)
}

fn say(
    actor: &str,
    event: &str,
    text: &str,
    priority: Rational,
    decay: Rational,
    timeout: Rational,
    at: u64,
) -> Proposal<Rational> {
    Proposal {
        id: format!("{actor}/{text}"),
        session: SessionId::new("arb").unwrap(),
        source_actor: actor.into(),
        action: Action::Say {
            author: actor.into(),
            text: text.into(),
        },
        priority,
        timeout_s: timeout,
        decay_rate: decay,
        submitted_at: at,
        in_response_to: event.into(),
    }
}

fn settings(cooldown: Rational) -> CoordinatorSettings<Rational> {
    CoordinatorSettings {
        cooldown_s: cooldown,
        tick_interval_ms: 250,
        emit_floor: r(1, 20),
        pass_sentinel: "[PASS]".into(),
    }
}

#[test]
fn highest_of_three_wins_the_next_tick() {
    let mut c = Coordinator::new(settings(r(3, 1)));
    for (actor, p) in [("low", r(2, 5)), ("mid", r(3, 5)), ("high", r(9, 10))] {
        c.submit(say(
            actor,
            &format!("e-{actor}"),
            actor,
            p,
            r(0, 1),
            r(30, 1),
            0,
        ))
        .unwrap();
    }
    let first = c.tick(250).expect("an emission");
    assert_eq!(first.source_actor, "high");
    assert_eq!(c.tick(500), None, "cooldown holds the rest");
}

/// A(0.9, decay 0.1/s) against B(0.6, no decay), both submitted at t=0 while a
/// previous emission holds the cooldown until `until_s`. Hand computation:
/// A's effective priority is 9/10 - t/10, which equals 6/10 at t = 3.
fn crossover_winner(until_s: i64) -> String {
    let mut c = Coordinator::new(settings(r(until_s, 1)));
    c.submit(say(
        "opener",
        "e0",
        "opening",
        r(1, 1),
        r(0, 1),
        r(60, 1),
        0,
    ))
    .unwrap();
    assert_eq!(c.tick(0).unwrap().source_actor, "opener");
    c.submit(say("A", "e1", "from A", r(9, 10), r(1, 10), r(60, 1), 0))
        .unwrap();
    c.submit(say("B", "e2", "from B", r(3, 5), r(0, 1), r(60, 1), 0))
        .unwrap();
    let mut now = 0;
    loop {
        now += 250;
        if let Some(p) = c.tick(now) {
            assert_eq!(now, until_s as u64 * 1000, "first eligible tick");
            return p.source_actor;
        }
    }
}

#[test]
fn decay_crossover_is_exact() {
    assert_eq!(crossover_winner(4), "B");
    assert_eq!(crossover_winner(2), "A");
}

#[test]
fn exactly_at_the_crossover_the_earlier_tie_break_applies() {
    // both equal 3/5 at t=3; same submission time, so the actor name decides
    assert_eq!(crossover_winner(3), "A");
}

/// Straightforward model of the arbitration rules used as an oracle.
#[derive(Default)]
struct Reference {
    pending: Vec<(u64, Proposal<Rational>)>,
    answered: Vec<String>,
    last_say: Option<u64>,
    order: u64,
}

fn eff(p: &Proposal<Rational>, now: u64) -> Rational {
    let age = Rational::new((now - p.submitted_at) as i64, 1000);
    let v = p.priority - p.decay_rate * age;
    if v < r(0, 1) {
        r(0, 1)
    } else {
        v
    }
}

impl Reference {
    fn submit(&mut self, p: Proposal<Rational>) -> bool {
        if self.answered.contains(&p.in_response_to) {
            return false;
        }
        self.pending.push((self.order, p));
        self.order += 1;
        true
    }

    fn tick(&mut self, now: u64, cooldown_ms: u64) -> Option<Proposal<Rational>> {
        self.pending
            .retain(|(_, p)| Rational::new((now - p.submitted_at) as i64, 1000) < p.timeout_s);
        let mut live: Vec<&(u64, Proposal<Rational>)> = self
            .pending
            .iter()
            .filter(|(_, p)| eff(p, now) > r(1, 20))
            .collect();
        live.sort_by(|(oa, a), (ob, b)| {
            eff(b, now)
                .cmp(&eff(a, now))
                .then(a.submitted_at.cmp(&b.submitted_at))
                .then(a.source_actor.cmp(&b.source_actor))
                .then(oa.cmp(ob))
        });
        let (order, best) = live.first().map(|(o, p)| (*o, p.clone()))?;
        if best.action.is_say() && self.last_say.is_some_and(|t| now - t < cooldown_ms) {
            return None;
        }
        if best.action.is_say() {
            self.last_say = Some(now);
        }
        self.pending
            .retain(|(o, p)| *o != order && p.in_response_to != best.in_response_to);
        self.answered.push(best.in_response_to.clone());
        Some(best)
    }
}

#[derive(Debug, Clone)]
struct Submission {
    actor: u8,
    event: u8,
    command: bool,
    priority: i64,
    decay: i64,
    timeout_ms: i64,
}

fn submission() -> impl Strategy<Value = Submission> {
    (
        0u8..4,
        0u8..40,
        prop::bool::weighted(0.2),
        0i64..=100,
        0i64..=20,
        1i64..=20_000,
    )
        .prop_map(
            |(actor, event, command, priority, decay, timeout_ms)| Submission {
                actor,
                event,
                command,
                priority,
                decay,
                timeout_ms,
            },
        )
}

const TICKS: usize = 10_000;
const TICK_MS: u64 = 250;
const COOLDOWN_MS: u64 = 3000;

fn fuzz_run(stream: Vec<Vec<Submission>>) -> Result<(), TestCaseError> {
    let mut c = Coordinator::new(settings(r(3, 1)));
    let mut oracle = Reference::default();
    let mut serial = 0u64;
    let mut emissions = 0usize;
    for (i, batch) in stream.into_iter().enumerate() {
        let now = i as u64 * TICK_MS;
        for s in batch {
            serial += 1;
            // events are scoped by a slowly advancing epoch so old ones stay answered
            let event = format!("ev{}-{}", i / 200, s.event);
            let mut p = say(
                &format!("actor{}", s.actor),
                &event,
                &format!("text {serial}"),
                r(s.priority, 100),
                r(s.decay, 100),
                r(s.timeout_ms, 1000),
                now,
            );
            if s.command {
                p.action = Action::Command {
                    name: "cmd".into(),
                    payload: Payload::from([("n".to_string(), serial.to_string())]),
                };
            }
            let accepted = c.submit(p.clone()).is_ok();
            prop_assert_eq!(accepted, oracle.submit(p));
        }
        let got = c.tick(now);
        let want = oracle.tick(now, COOLDOWN_MS);
        if let Some(p) = &got {
            emissions += 1;
            let age_ms = (now - p.submitted_at) as i64;
            prop_assert!(
                Rational::new(age_ms, 1000) < p.timeout_s,
                "emitted at age {} ms",
                age_ms
            );
        }
        prop_assert_eq!(got.map(|p| p.id), want.map(|p| p.id), "tick {}", i);
    }
    prop_assert!(emissions <= TICKS);
    Ok(())
}

#[test]
fn ten_thousand_tick_fuzz_matches_the_reference_model() {
    let batch = prop::collection::vec(submission(), 0..3);
    let strategy = prop::collection::vec(batch, TICKS);
    let mut runner = TestRunner::new(Config {
        cases: 4,
        failure_persistence: None,
        ..Config::default()
    });
    runner.run(&strategy, fuzz_run).unwrap();
}

proptest! {
    #[test]
    fn short_streams_match_the_reference_model(
        stream in prop::collection::vec(prop::collection::vec(submission(), 0..4), 1..120)
    ) {
        fuzz_run(stream)?;
    }
}
