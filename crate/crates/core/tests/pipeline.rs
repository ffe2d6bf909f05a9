//! Scene to features to tokens to regions, with an untrained model.

use ren::aggregation::{aggregate, masks_from_groups, MinGroup, PromptLayout};
use ren::data::{generate_scene, render_scene, SceneConfig};
use ren::extension::{attention_pool, extend, PoolingHead};
use ren::model::{forward, init_params, RenConfig};
use ren::prompting::{slic_prompts, slic_segment, DEFAULT_COMPACTNESS, DEFAULT_ITERS};

#[test]
fn slic_tokens_to_masks_and_extension() {
    let scene = generate_scene(21, &SceneConfig::new(4, 64, 64, 16)).unwrap();
    let view = render_scene(&scene, 8, 8, 0.05).unwrap();
    let superpixels = slic_segment(&view.rgb, 49, DEFAULT_COMPACTNESS, DEFAULT_ITERS).unwrap();
    let prompts = slic_prompts(&superpixels);
    assert_eq!(prompts.len(), superpixels.count());

    let cfg = RenConfig {
        d_model: 16,
        n_blocks: 2,
        n_heads: 4,
        encoder_dim: 16,
        ffn_mult: 4,
    };
    let params = init_params(0, &cfg).unwrap();
    let tokens = forward(&view.features, &prompts, &params, &cfg).unwrap();
    let layout = PromptLayout::from_superpixels(superpixels);

    for mu in [0.5f32, 0.9, 0.99] {
        let agg = aggregate(&tokens, mu, MinGroup::Fixed(1)).unwrap();
        let masks = masks_from_groups(&layout, &agg).unwrap();
        // every pixel belongs to exactly one group mask
        let mut cover = vec![0u8; 64 * 64];
        for m in &masks {
            for (c, &b) in cover.iter_mut().zip(m.bits()) {
                *c += b as u8;
            }
        }
        assert!(cover.iter().all(|&c| c == 1), "mu {mu}");
    }

    let mut target = view.features.clone();
    let head = PoolingHead::random(9, 16, 4).unwrap();
    target.pooling_head = Some(head.clone());
    let one_group = aggregate(&tokens, -1.0, MinGroup::Fixed(1)).unwrap();
    assert_eq!(one_group.n_groups(), 1);
    let ext = extend(&target, &layout, &one_group).unwrap();
    let global = attention_pool(target.features(), &head).unwrap();
    assert_eq!(ext.aligned.row(0).to_vec(), global.to_vec());

    let fine = aggregate(&tokens, 0.99, MinGroup::Fixed(1)).unwrap();
    let coarse = aggregate(&tokens, 0.8, MinGroup::Fixed(1)).unwrap();
    assert!(fine.n_groups() >= coarse.n_groups());
    assert_eq!(extend(&target, &layout, &fine).unwrap().len(), fine.n_groups());
}

#[test]
fn extension_needs_a_pooling_head() {
    let scene = generate_scene(2, &SceneConfig::new(3, 32, 32, 8)).unwrap();
    let view = render_scene(&scene, 4, 4, 0.0).unwrap();
    let superpixels = slic_segment(&view.rgb, 9, DEFAULT_COMPACTNESS, DEFAULT_ITERS).unwrap();
    let n = superpixels.count();
    let layout = PromptLayout::from_superpixels(superpixels);
    let tokens = ren::data::TokenSet {
        prompts: vec![ren::data::PointPrompt { x: 0.5, y: 0.5 }; n],
        ren: ndarray::Array2::ones((n, 4)),
        aligned: ndarray::Array2::ones((n, 8)),
        source: String::new(),
    };
    let agg = aggregate(&tokens, 0.9, MinGroup::Fixed(1)).unwrap();
    assert!(extend(&view.features, &layout, &agg).is_err());
}
