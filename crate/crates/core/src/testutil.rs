use crate::grid::{Branch, Bus, BusKind, Gen, GridCase};

/// Slack bus feeding one PQ bus through a single line.
pub fn two_bus(x: f64, b_charging: f64) -> GridCase {
    GridCase {
        base_mva: 100.0,
        buses: vec![
            Bus {
                id: 1,
                kind: BusKind::Slack,
                p_demand: 0.0,
                q_demand: 0.0,
                shunt_g: 0.0,
                shunt_b: 0.0,
                v_mag_init: 1.0,
                v_ang_init: 0.0,
            },
            Bus {
                id: 2,
                kind: BusKind::Pq,
                p_demand: 0.0,
                q_demand: 0.0,
                shunt_g: 0.0,
                shunt_b: 0.0,
                v_mag_init: 1.0,
                v_ang_init: 0.0,
            },
        ],
        gens: vec![Gen {
            bus: 1,
            p_out: 0.0,
            q_out: 0.0,
            q_max: 100.0,
            q_min: -100.0,
            v_set: 1.0,
            status: true,
        }],
        branches: vec![Branch {
            from: 1,
            to: 2,
            r: 0.0,
            x,
            b_charging,
            tap_ratio: 0.0,
            phase_shift: 0.0,
            status: true,
        }],
    }
}
