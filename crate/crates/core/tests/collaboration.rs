use gtspace::agents::AgentModel;
use gtspace::config::{Ablation, ChannelConfig};
use gtspace::dataset::{Dataset, Split};
use gtspace::geometry::FeatureMap;
use gtspace::pipeline::{collaborate, decode_fused, CollabSystem, SenderFrame};
use gtspace::seed::rng_for;
use gtspace::training::small_config;

fn setup() -> (Dataset, CollabSystem) {
    let mut cfg = small_config();
    cfg.channel.compression_ratio = 1;
    cfg.world.train_scenes = 2;
    cfg.world.val_scenes = 2;
    let ds = Dataset::generate(&cfg).unwrap();
    let agents: Vec<AgentModel> = cfg.agents.iter().map(|a| AgentModel::from_config(&cfg, a)).collect();
    let sys = CollabSystem::new(&cfg, agents, Ablation::default(), 4).unwrap();
    (ds, sys)
}

fn common(ds: &Dataset, sys: &CollabSystem, a: usize, t: usize) -> FeatureMap {
    let agent = &sys.agents[a];
    let s = ds.frame(Split::Val, 0, t);
    sys.to_common(a, &agent.encode(&ds.observe(&agent.config, &s, agent.config.slot)).unwrap()).unwrap()
}

#[test]
fn clean_channel_equals_direct_fusion() {
    let (ds, sys) = setup();
    let t = 3;
    let s = ds.frame(Split::Val, 0, t);
    let ego_pose = s.pose(sys.agents[0].config.slot);
    let sender_pose = s.pose(sys.agents[1].config.slot);
    let stream: Vec<SenderFrame> = (0..=t)
        .map(|f| SenderFrame {
            sender_id: sys.agents[1].id().into(),
            frame_id: f,
            pose: ds.frame(Split::Val, 0, f).pose(sys.agents[1].config.slot),
            features: common(&ds, &sys, 1, f),
        })
        .collect();
    let ego = common(&ds, &sys, 0, t);
    let clean = ChannelConfig { latency_frames: 0, sigma_p: 0.0, sigma_r: 0.0, compression_ratio: 1 };
    let (dets, trace) = collaborate(&sys, &ego, &ego_pose, &[stream], &clean, t, 0.0, 0.2, &mut rng_for(0, "test", 0)).unwrap();
    let direct = sys.fuse_received(&ego, &ego_pose, &[(common(&ds, &sys, 1, t), sender_pose)], 0.0, 0.2).unwrap();
    assert!(!dets.is_empty());
    assert_eq!(dets, direct);
    assert_eq!(trace.len(), 1);
    assert_eq!(trace[0].frame_used, t);
    assert_eq!(trace[0].pose_noise, [0.0, 0.0, 0.0]);
}

#[test]
fn ego_alone_is_the_single_map_fusion() {
    let (ds, sys) = setup();
    let t = 2;
    let ego = common(&ds, &sys, 0, t);
    let pose = ds.frame(Split::Val, 0, t).pose(sys.agents[0].config.slot);
    let clean = ChannelConfig { compression_ratio: 1, ..ChannelConfig::default() };
    let (dets, trace) = collaborate(&sys, &ego, &pose, &[], &clean, t, 0.0, 0.2, &mut rng_for(0, "test", 0)).unwrap();
    let fused = sys.fusion.fuse(&[ego]).unwrap();
    assert_eq!(dets, decode_fused(&sys, &fused, 0.0, 0.2));
    assert!(trace.is_empty());
}

#[test]
fn codec_ratio_must_match_channel() {
    let (ds, sys) = setup();
    let ego = common(&ds, &sys, 0, 0);
    let pose = ds.frame(Split::Val, 0, 0).pose(0);
    let ch = ChannelConfig { compression_ratio: 2, ..ChannelConfig::default() };
    assert!(collaborate(&sys, &ego, &pose, &[], &ch, 0, 0.3, 0.2, &mut rng_for(0, "test", 0)).is_err());
}
