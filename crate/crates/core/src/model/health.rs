use super::{RunParameters, Timestamp};

/// Infection state of a node. Cycles Safe -> Infected -> Immune -> Safe.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HealthPhase {
    Safe,
    Infected { infected_at: Timestamp },
    Immune { immune_until: Timestamp },
}

impl HealthPhase {
    pub fn is_infected(&self) -> bool {
        matches!(self, HealthPhase::Infected { .. })
    }
}

/// Advances the state machine to `now`.
///
/// Expiry transitions fire on elapsed time alone; an in-range infected contact
/// only affects a `Safe` node. The immunity deadline is anchored to the moment
/// the cure fires, not to when the infection began.
pub fn update_health(
    phase: HealthPhase,
    now: Timestamp,
    infected_contact_in_range: bool,
    params: &RunParameters,
) -> HealthPhase {
    match phase {
        HealthPhase::Safe if infected_contact_in_range => HealthPhase::Infected { infected_at: now },
        HealthPhase::Infected { infected_at } if now.has_elapsed(infected_at, params.infection_cooldown) => {
            HealthPhase::Immune {
                immune_until: now.plus_secs(params.infection_cooldown),
            }
        }
        HealthPhase::Immune { immune_until } if now >= immune_until => HealthPhase::Safe,
        unchanged => unchanged,
    }
}

/// Infected nodes stay where they are.
pub fn is_stationary(phase: HealthPhase) -> bool {
    phase.is_infected()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const T0: Timestamp = Timestamp::from_unix_micros(1_606_925_940_000_000);

    fn at(secs: u64) -> Timestamp {
        T0.plus_secs(secs)
    }

    fn params(cooldown: u64) -> RunParameters {
        RunParameters { infection_cooldown: cooldown, ..RunParameters::default() }
    }

    #[test]
    fn safe_node_catches_infection() {
        assert_eq!(
            update_health(HealthPhase::Safe, at(3), true, &params(15)),
            HealthPhase::Infected { infected_at: at(3) }
        );
        assert_eq!(update_health(HealthPhase::Safe, at(3), false, &params(15)), HealthPhase::Safe);
    }

    #[test]
    fn cure_sets_immunity_from_cure_time() {
        // 18 - 3 = 15 >= cooldown, immune until 18 + 15 = 33.
        assert_eq!(
            update_health(HealthPhase::Infected { infected_at: at(3) }, at(18), true, &params(15)),
            HealthPhase::Immune { immune_until: at(33) }
        );
        assert_eq!(
            update_health(HealthPhase::Infected { infected_at: at(3) }, at(17), true, &params(15)),
            HealthPhase::Infected { infected_at: at(3) }
        );
    }

    #[test]
    fn immune_node_ignores_contacts() {
        let immune = HealthPhase::Immune { immune_until: at(33) };
        assert_eq!(update_health(immune, at(20), true, &params(15)), immune);
        assert_eq!(update_health(immune, at(33), false, &params(15)), HealthPhase::Safe);
    }

    #[test]
    fn stationary_only_when_infected() {
        assert!(!is_stationary(HealthPhase::Safe));
        assert!(is_stationary(HealthPhase::Infected { infected_at: at(0) }));
        assert!(!is_stationary(HealthPhase::Immune { immune_until: at(0) }));
    }

    #[test]
    fn continuous_exposure_cycle() {
        let cooldown = 15;
        let p = params(cooldown);
        let mut phase = HealthPhase::Safe;
        let mut trace = Vec::new();
        for t in 0..60 {
            phase = update_health(phase, at(t), true, &p);
            trace.push(match phase {
                HealthPhase::Safe => 'S',
                HealthPhase::Infected { .. } => 'I',
                HealthPhase::Immune { .. } => 'R',
            });
        }
        let trace: String = trace.into_iter().collect();
        // Infected at 0..15, immune at 15..30, safe at 30, reinfected at 31.
        let expected = format!("{}{}S{}{}", "I".repeat(15), "R".repeat(15), "I".repeat(15), "R".repeat(14));
        assert_eq!(trace, expected);
    }

    fn phase_strategy() -> impl Strategy<Value = HealthPhase> {
        prop_oneof![
            Just(HealthPhase::Safe),
            (0u64..100).prop_map(|s| HealthPhase::Infected { infected_at: at(s) }),
            (0u64..100).prop_map(|s| HealthPhase::Immune { immune_until: at(s) }),
        ]
    }

    proptest! {
        #[test]
        fn stationary_iff_infected(phase in phase_strategy()) {
            prop_assert_eq!(is_stationary(phase), matches!(phase, HealthPhase::Infected { .. }));
        }

        #[test]
        fn never_cured_without_immunity(phase in phase_strategy(), dt in 0u64..200, contact in any::<bool>()) {
            let next = update_health(phase, at(100 + dt), contact, &params(15));
            if phase.is_infected() {
                prop_assert!(!matches!(next, HealthPhase::Safe));
            }
            if let HealthPhase::Immune { .. } = phase {
                prop_assert!(!next.is_infected());
            }
        }
    }
}
