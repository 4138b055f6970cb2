//! In-process worlds of endpoints connected by loopback fabrics.

use std::sync::Arc;

use unr::diag::Diagnostics;
use unr::engine::{ChannelOptions, Endpoint, EngineError, Level2Mode, Progress, DEFAULT_POLL_INTERVAL};
use unr::memory::Registry;
use unr::signal::LayoutConfig;
use unr::transport::{ChannelCapability, LoopbackFabric};

#[derive(Debug, Clone, Copy)]
pub struct WorldOptions {
    pub cap: ChannelCapability,
    pub rails: usize,
    pub layout: LayoutConfig,
    pub max_fragments: u64,
    pub progress: Progress,
    pub level2_mode: Level2Mode,
}

impl Default for WorldOptions {
    fn default() -> Self {
        Self {
            cap: ChannelCapability::GLEX,
            rails: 1,
            layout: LayoutConfig::default(),
            max_fragments: 1,
            progress: Progress::Agent(DEFAULT_POLL_INTERVAL),
            level2_mode: Level2Mode::Auto,
        }
    }
}

/// `n` endpoints, one per rank, each attached to `rails` shared fabrics.
/// The first rail doubles as the bootstrap exchange.
pub fn loopback_world(n: u32, opts: WorldOptions) -> Result<Vec<Endpoint>, EngineError> {
    let fabrics = (0..opts.rails.max(1))
        .map(|i| LoopbackFabric::new(i as u16, opts.cap, n))
        .collect::<Result<Vec<_>, _>>()?;
    (0..n)
        .map(|r| {
            let reg = Arc::new(Registry::default());
            let mut b = Endpoint::builder(r, reg.clone())
                .layout(opts.layout)
                .max_fragments(opts.max_fragments)
                .progress(opts.progress)
                .diagnostics(Arc::new(Diagnostics::quiet()));
            for (i, f) in fabrics.iter().enumerate() {
                let ch = f.attach(r, reg.clone());
                if i == 0 {
                    b = b.bootstrap(ch.clone());
                }
                b = b.channel_with(
                    ch,
                    ChannelOptions {
                        level2_mode: opts.level2_mode,
                        ..Default::default()
                    },
                );
            }
            b.build()
        })
        .collect()
}
