//! Reporting-only micro-benchmark: sequential VM creation rate.
//!
//! Creates VMs one after another (memory map, VM, memory slots, one vCPU
//! configured for long-mode entry) and prints machines per second. Not an
//! acceptance criterion; creation-rate claims depend entirely on host
//! hardware and parallelism.

use std::time::Instant;

use vmm::boot;
use vmm::guest_memory::{GuestAddress, GuestMemoryMap};
use vmm::kvm::Hypervisor;

fn main() {
    let hypervisor = match Hypervisor::open() {
        Ok(hv) => hv,
        Err(e) => {
            eprintln!("creation_rate: {e}; nothing to measure");
            return;
        }
    };

    let iterations = 50;
    let started = Instant::now();
    for _ in 0..iterations {
        let mem = GuestMemoryMap::with_ram_size(128 << 20).expect("memory map");
        let mut vm = hypervisor.create_vm().expect("create VM");
        vm.register_memory(&mem).expect("register memory");
        let vcpu = vm.create_vcpu(&hypervisor, 0).expect("create vCPU");
        // Minimal boot structures so long-mode configuration is honest.
        let image = {
            let mut pm = vec![0u8; 0x1000];
            pm[0x200] = 0xf4; // hlt
            synthetic_image(&pm)
        };
        let info = boot::parse_bzimage(&image).expect("parse");
        let layout = boot::plan_layout(&info, 0, 0, 128 << 20).expect("layout");
        let entry = boot::load_guest(&mem, &image, &info, &layout, "", None).expect("load");
        vcpu.configure_for_long_mode(
            entry,
            layout.zero_page,
            layout.page_table_root,
            layout.gdt_addr,
            GuestAddress(boot::IDT_ADDR),
        )
        .expect("long mode");
        // Dropping everything releases the per-process VM permit.
    }
    let elapsed = started.elapsed();
    let rate = iterations as f64 / elapsed.as_secs_f64();
    println!(
        "created {iterations} machines sequentially in {elapsed:?} ({rate:.1} VMs/s on one thread)"
    );
}

fn synthetic_image(pm_code: &[u8]) -> Vec<u8> {
    let mut image = vec![0u8; 5 * 512];
    image[0x1f1] = 4;
    image[0x201] = 0x66;
    image[0x1fe..0x200].copy_from_slice(&0xAA55u16.to_le_bytes());
    image[0x202..0x206].copy_from_slice(&0x5372_6448u32.to_le_bytes());
    image[0x206..0x208].copy_from_slice(&0x020fu16.to_le_bytes());
    image[0x211] = 0x01;
    image[0x236..0x238].copy_from_slice(&0x0001u16.to_le_bytes());
    image.extend_from_slice(pm_code);
    image
}
