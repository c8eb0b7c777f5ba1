use msaupaf::chargrid::{grid_geometry, DEFAULT_MEDIAN_HEIGHT};
use msaupaf::decode::{decode, DecodeConfig, PafMaps, PifMaps, SegMaps};
use msaupaf::eval::{ClassMatch, EvalReport, DEFAULT_IOU};
use msaupaf::funsd::FormDocument;
use msaupaf::synth::{generate, LayoutMode, SynthSpec};
use msaupaf::targets::{encode_targets, FieldGeometry, DEFAULT_RADIUS};

fn decode_own_targets(form: &FormDocument) -> FormDocument {
    let grid = grid_geometry(form, DEFAULT_MEDIAN_HEIGHT).unwrap();
    let t = encode_targets(form, &grid, 4, DEFAULT_RADIUS, 4).unwrap();
    let field = FieldGeometry::new(grid, 4);
    let d = decode(
        &SegMaps::from_mask(&t.seg_mask, 5, t.height, t.width),
        &PifMaps::from_target(&t.pif),
        &PafMaps::from_target(&t.paf),
        &field,
        (form.page_width, form.page_height),
        &DecodeConfig::default(),
    );
    d.to_form_document()
}

#[test]
fn targets_decode_to_ground_truth() {
    for mode in [LayoutMode::Easy, LayoutMode::Hard] {
        let spec = SynthSpec { n_forms: 50, mode, ..Default::default() };
        let forms = generate(7, &spec).unwrap();
        let pairs: Vec<_> = forms.iter().map(|f| (decode_own_targets(f), f.clone())).collect();
        let r = EvalReport::from_pairs(&pairs, DEFAULT_IOU, ClassMatch::Joint);
        println!("{mode:?} {} {:?} {:?}", r.n_forms, r.labeling, r.linking);
        assert_eq!(r.labeling.f1(), 1.0);
        assert!(r.linking.f1() >= 0.99);
    }
}
