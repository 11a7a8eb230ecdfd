use super::*;
use crate::netspec::Phase;
use proptest::prelude::*;

fn trace(cycles: u64, mac_ops: u64, read: u64, written: u64, bits: &str) -> StepTrace {
    StepTrace {
        batch: 0,
        index: 0,
        step: "FF L0 FC-FF".into(),
        phase: Phase::FF,
        op: OpClass::FCFF,
        bit_mode: bits.into(),
        cycles,
        vault_read: vec![read, 0],
        vault_written: vec![0, written],
        bus_broadcast: 0,
        bus_merged: 0,
        mac_ops,
        busy: 0,
        stall_buffer_empty: 0,
        stall_bus: 0,
        stall_writeback: 0,
        saturations: 0,
    }
}

#[test]
fn peaks() {
    let c = MachineConfig::hmc1();
    assert_eq!(peak(&c, BitMode::B16), 4.8e12);
    assert_eq!(peak(&c, BitMode::B32), 2.4e12);
    assert_eq!(peak(&c, BitMode::B32Sr), 2.4e12);
    assert!((peak(&MachineConfig::hmc2(), BitMode::B16) - 9.92e12).abs() < 1.0);
}

#[test]
fn throughput_counts_two_ops_per_mac() {
    let c = MachineConfig::hmc1();
    // 960 MACs per cycle is the 16-bit peak.
    let t = trace(1000, 960_000, 0, 0, "16");
    assert!((throughput(&t, &c).unwrap() - 4.8e12).abs() < 1.0);
    assert!((utilization(&t, &c).unwrap() - 1.0).abs() < 1e-12);
    assert!(throughput(&trace(0, 1, 0, 0, "16"), &c).is_err());
}

#[test]
fn dram_power_example() {
    let w = dram_power(68.5e9, 1.0, &PowerTable::default());
    assert!((w - 2.03).abs() / 2.03 < 0.005, "{w}");
}

#[test]
fn zero_traffic_zero_dram_energy() {
    let e = energy(&[trace(100, 0, 0, 0, "32")], &PowerTable::default(), &MachineConfig::hmc1());
    assert_eq!(e.dram_joules, 0.0);
    assert_eq!(e.logic_joules, 0.0);
}

#[test]
fn vgg16_scaleout_example() {
    let s = scaleout(&ScaleOutParams::vgg16(4));
    assert!((s.total_s * 1e3 - 269.58).abs() < 1e-9, "{}", s.total_s);
    assert!((s.images_per_s - 128.0 / 0.26958).abs() < 1e-6);
    let one = scaleout(&ScaleOutParams { modules: 1, t1: 0.05, t_up: 0.0, t_link: 0.0, batch: 32 });
    assert_eq!(one.total_s, 0.05);
}

#[test]
fn host_helper_matches_direct_times() {
    let p = ScaleOutParams::from_host(4, 0.0631, 138e6, (100.0, 326e9), (8.0, 240e9), 32);
    assert!((p.t_up - 138e6 * 100.0 / 326e9).abs() < 1e-15);
    assert!((p.t_link - 138e6 * 8.0 / 240e9).abs() < 1e-15);
}

#[test]
fn sweep_saturates() {
    let rows = scaleout_sweep(&ScaleOutParams::vgg16(1), 64);
    assert_eq!(rows.len(), 64);
    let ips: Vec<f64> = rows.iter().map(|r| r.images_per_s).collect();
    assert!(ips.windows(2).all(|w| w[1] >= w[0]));
    // Bounded by batch / (t_up + 2 t_link).
    assert!(ips[63] < 32.0 / (42.4e-3 + 2.0 * 4.61e-3));
    assert!(scaleout_table(&rows).lines().count() == 65);
}

#[test]
fn report_groups_by_op() {
    let c = MachineConfig::hmc1();
    let r = report(&[trace(10, 4800, 8, 8, "16"), trace(10, 4800, 8, 8, "16")], &c);
    assert_eq!(r.per_op.len(), 1);
    assert_eq!(r.per_op[0].steps, 2);
    assert!((r.per_op[0].utilization - 0.5).abs() < 1e-12);
    assert!(r.text().contains("FC-FF"));
    serde_json::to_string(&r).unwrap();
}

proptest! {
    #[test]
    fn scaleout_monotone(n in 1usize..64, t1 in 1e-3f64..1.0, up in 1e-4f64..0.1, link in 1e-4f64..0.1, bump in 1e-4f64..0.1) {
        let p = ScaleOutParams { modules: n, t1, t_up: up, t_link: link, batch: 32 };
        let base = scaleout(&p).total_s;
        let more = [
            ScaleOutParams { modules: n + 1, ..p },
            ScaleOutParams { t1: t1 + bump, ..p },
            ScaleOutParams { t_up: up + bump, ..p },
            ScaleOutParams { t_link: link + bump, ..p },
        ];
        for q in more {
            prop_assert!(scaleout(&q).total_s > base);
        }
        let free = |n| scaleout(&ScaleOutParams { modules: n, t_up: 0.0, t_link: 0.0, ..p }).images_per_s;
        prop_assert!(free(n + 1) > free(n));
    }

    #[test]
    fn energy_is_additive(a in 1u64..10_000, b in 1u64..10_000, ra in 0u64..1 << 20, rb in 0u64..1 << 20) {
        let (c, tab) = (MachineConfig::hmc1(), PowerTable::default());
        let (x, y) = (trace(a, a * 10, ra, ra / 2, "32"), trace(b, b, rb, 0, "16"));
        let whole = energy(&[x.clone(), y.clone()], &tab, &c);
        let (ex, ey) = (energy(&[x], &tab, &c), energy(&[y], &tab, &c));
        prop_assert!((whole.dram_joules - ex.dram_joules - ey.dram_joules).abs() <= 1e-12 * whole.dram_joules.max(1e-30));
        prop_assert!((whole.logic_joules - ex.logic_joules - ey.logic_joules).abs() <= 1e-12 * whole.logic_joules.max(1e-30));
    }
}
