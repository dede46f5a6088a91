//! Measured event counters against the closed-form costs.

use qgka_core::cost::{c_ghz, c_join, c_leave};
use qgka_core::protocol::{Group, ProtocolConfig};
use qgka_core::{DecoyPolicy, UserId};

fn full_tree_costs(d: usize, levels: u32, xi: f64, n: usize, policy: DecoyPolicy) -> (u64, u64, usize) {
    let users = d.pow(levels);
    let config = ProtocolConfig { key_len: n, xi, decoy_policy: policy, track_views: false, ..Default::default() };
    let mut g = Group::balanced(users, d, config, 11).unwrap();
    let leave = g.leave(UserId(1)).unwrap();
    let join = g.join(UserId(users as u64 + 1)).unwrap();
    (leave.counters.qubits_prepared, join.counters.qubits_prepared, users)
}

#[test]
fn full_trees_without_decoys() {
    for d in 2..=4 {
        for levels in 2..=4 {
            let (leave, join, users) = full_tree_costs(d, levels, 0.0, 1, DecoyPolicy::PerHopCeil);
            let l = levels as f64;
            assert_eq!(leave, ((d + 1) * (levels as usize - 1) + d) as u64, "d={d} N={users}");
            assert_eq!(join, 2 * levels as u64);
            assert!((c_leave(users as f64, 1.0, 0.0, d) - leave as f64).abs() < 1e-9);
            assert!((c_join(users as f64, 1.0, 0.0, d) - join as f64).abs() < 1e-9);
            assert!((c_ghz(d as f64 + 1.0, 1.0, 0.0) * (l - 1.0) + c_ghz(d as f64, 1.0, 0.0) - leave as f64).abs() < 1e-9);
        }
    }
}

#[test]
fn full_trees_with_integral_decoys() {
    // 120 positions split evenly over 2..=5 leaders, and half of every share is whole.
    for policy in [DecoyPolicy::PerHopCeil, DecoyPolicy::Carry] {
        for (xi, n) in [(1.0, 1), (0.5, 120)] {
            for d in 2..=4 {
                for levels in 2..=4 {
                    let (leave, join, users) = full_tree_costs(d, levels, xi, n, policy);
                    let (g, nf) = (users as f64, n as f64);
                    assert!((c_leave(g, nf, xi, d) - leave as f64).abs() < 1e-6, "{policy:?} xi={xi} d={d} N={users}");
                    assert!((c_join(g, nf, xi, d) - join as f64).abs() < 1e-6, "{policy:?} xi={xi} d={d} N={users}");
                }
            }
        }
    }
}

#[test]
fn carry_policy_tracks_the_fractional_total() {
    // ξ·payload is fractional here; the run total stays within one decoy of ξ·(total payload).
    let config = ProtocolConfig { key_len: 7, xi: 0.3, track_views: false, ..Default::default() };
    let mut g = Group::balanced(64, 4, config, 2).unwrap();
    let mut decoys = 0u64;
    let mut payload = 0u64;
    for u in 1..=20u64 {
        let t = g.leave(UserId(u)).unwrap();
        for s in &t.sessions {
            for h in &s.hops {
                decoys += h.decoys as u64;
                payload += h.payload as u64;
            }
        }
    }
    let exact = 0.3 * payload as f64;
    assert!((exact - decoys as f64).abs() < 1.0 + 1e-9, "{decoys} vs {exact}");
}
