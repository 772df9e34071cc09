#include "mrham/gradcheck.hpp"

#include "mrham/attention.hpp"
#include "mrham/backbone.hpp"
#include "mrham/boxes.hpp"
#include "mrham/detector.hpp"
#include "mrham/ops.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

namespace mrham {

double gradient_error(double analytic, double numeric, double floor) {
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

GradCheckResult check_gradients(const std::string& name, const std::vector<Tensor<double>>& inputs,
                                const std::function<Tensor<double>()>& loss, Rng& rng, int max_per_tensor,
                                double eps, double tolerance, const std::function<double()>& reference) {
    GradCheckResult result;
    result.name = name;
    std::vector<Tensor<double>> xs = inputs;
    for (auto& x : xs) {
        x.set_requires_grad(true);
        x.zero_grad();
    }
    backward(loss());
    auto value = [&] { return reference ? reference() : loss().item(); };

    for (auto& x : xs) {
        const Array<double> analytic = x.has_grad() ? Array<double>(x.grad()) : Array<double>(Array<double>::Zero(x.numel()));
        std::vector<std::int64_t> picks(static_cast<std::size_t>(x.numel()));
        std::iota(picks.begin(), picks.end(), 0);
        if (static_cast<int>(picks.size()) > max_per_tensor) {
            rng.shuffle(picks);
            picks.resize(static_cast<std::size_t>(max_per_tensor));
        }
        for (std::int64_t i : picks) {
            const double v = x.values()[i];
            double plus, minus;
            {
                NoGradGuard guard;
                x.values()[i] = v + eps;
                plus = value();
                x.values()[i] = v - eps;
                minus = value();
            }
            x.values()[i] = v;
            const double numeric = (plus - minus) / (2 * eps);
            result.max_rel_error = std::max(result.max_rel_error, gradient_error(analytic[i], numeric));
            ++result.checked;
        }
    }
    result.passed = result.max_rel_error < tolerance;
    return result;
}

namespace {

using TD = Tensor<double>;

TD random_tensor(Shape shape, Rng& rng, double lo = -1, double hi = 1) {
    Array<double> v(shape_numel(shape));
    for (auto& x : v) x = rng.uniform(lo, hi);
    return TD(std::move(shape), std::move(v));
}

// Fixed random projection to a scalar, so every output entry influences the loss.
std::function<TD(const TD&)> projector(Rng& rng) {
    auto weights = std::make_shared<std::map<std::int64_t, Array<double>>>();
    const std::uint64_t seed = rng.next_u64();
    return [weights, seed](const TD& out) {
        auto it = weights->find(out.numel());
        if (it == weights->end()) {
            Rng r(seed);
            Array<double> w(out.numel());
            for (auto& x : w) x = r.uniform(-1, 1);
            it = weights->emplace(out.numel(), std::move(w)).first;
        }
        return sum(mul_constant(out, it->second));
    };
}

std::vector<TD> trainable(ParamList<double>& params) {
    std::vector<TD> out;
    for (auto& p : params)
        if (p.kind != ParamKind::buffer) out.push_back(p.tensor);
    return out;
}

}  // namespace

std::vector<GradCheckResult> gradient_suite(std::uint64_t seed, double tol) {
    Rng rng = Rng::derive(seed, 0x67726164);
    std::vector<GradCheckResult> out;
    auto proj = projector(rng);
    auto check = [&](const std::string& name, std::vector<TD> inputs, std::function<TD()> f) {
        out.push_back(check_gradients(name, inputs, f, rng, 48, 1e-6, tol));
    };
    auto unary_case = [&](const std::string& name, std::function<TD(const TD&)> op, double lo = -2, double hi = 2) {
        TD x = random_tensor({2, 3, 4, 4}, rng, lo, hi);
        check(name, {x}, [=] { return proj(op(x)); });
    };

    {
        TD x = random_tensor({2, 3, 6, 6}, rng), w = random_tensor({4, 3, 3, 3}, rng), b = random_tensor({4}, rng);
        check("conv2d 3x3 pad 1 + bias", {x, w, b}, [=] { return proj(conv2d(x, w, b, 1, 1)); });
    }
    {
        TD x = random_tensor({2, 3, 7, 7}, rng), w = random_tensor({4, 3, 3, 3}, rng);
        check("conv2d 3x3 stride 2", {x, w}, [=] { return proj(conv2d(x, w, TD{}, 2, 1)); });
    }
    {
        TD x = random_tensor({2, 4, 5, 5}, rng), w = random_tensor({3, 4, 1, 1}, rng);
        check("conv2d 1x1", {x, w}, [=] { return proj(conv2d(x, w)); });
    }
    for (bool training : {true, false}) {
        TD x = random_tensor({3, 4, 4, 4}, rng), g = random_tensor({4}, rng, 0.5, 1.5), b = random_tensor({4}, rng);
        auto rm = std::make_shared<TD>(random_tensor({4}, rng, -0.2, 0.2));
        auto rv = std::make_shared<TD>(random_tensor({4}, rng, 0.5, 1.5));
        check(training ? "batch_norm2d train" : "batch_norm2d eval", {x, g, b},
              [=] { return proj(batch_norm2d(x, g, b, *rm, *rv, 1e-5, 0.03, training)); });
    }
    unary_case("mish", [](const TD& x) { return mish(x); }, -4, 4);
    unary_case("leaky_relu", [](const TD& x) { return leaky_relu(x); });
    unary_case("sigmoid", [](const TD& x) { return sigmoid(x); }, -4, 4);
    unary_case("exp", [](const TD& x) { return exp(x); });
    unary_case("clamp", [](const TD& x) { return clamp(x, -1.0, 1.0); });
    unary_case("global_avg_pool", [](const TD& x) { return global_avg_pool(x); });
    unary_case("global_max_pool", [](const TD& x) { return global_max_pool(x); });
    unary_case("channel_mean", [](const TD& x) { return channel_mean(x); });
    unary_case("channel_max", [](const TD& x) { return channel_max(x); });
    unary_case("max_pool2d 3/2/1", [](const TD& x) { return max_pool2d(x, 3, 2, 1); });
    unary_case("max_pool2d 5/1/2", [](const TD& x) { return max_pool2d(x, 5, 1, 2); });
    unary_case("upsample_nearest2x", [](const TD& x) { return upsample_nearest2x(x); });
    unary_case("spp_pool", [](const TD& x) { return spp_pool(x); });
    unary_case("scale", [](const TD& x) { return scale(x, 1.7); });
    unary_case("add_scalar", [](const TD& x) { return add_scalar(x, 0.3); });
    unary_case("reshape", [](const TD& x) { return reshape(x, {6, 16}); });
    unary_case("sum", [](const TD& x) { return scale(sum(x), 0.5); });
    unary_case("mean", [](const TD& x) { return scale(mean(x), 3.0); });
    {
        TD x = random_tensor({2, 3, 4, 4}, rng);
        Array<double> c(x.numel());
        for (auto& v : c) v = rng.uniform(-1, 1);
        check("add_constant", {x}, [=] { return proj(add_constant(x, c)); });
        check("mul_constant", {x}, [=] { return proj(mul_constant(x, c)); });
    }
    {
        TD a = random_tensor({2, 3, 4, 4}, rng), b = random_tensor({2, 2, 4, 4}, rng), c = random_tensor({1, 3, 4, 4}, rng);
        check("concat channels", {a, b}, [=] { return proj(concat<double>({a, b}, 1)); });
        check("concat batch", {a, c}, [=] { return proj(concat<double>({a, c}, 0)); });
    }
    for (const auto& [label, bshape] : std::vector<std::pair<std::string, Shape>>{
             {"same", {2, 3, 4, 4}}, {"per-channel", {2, 3, 1, 1}}, {"per-position", {2, 1, 4, 4}}}) {
        TD a = random_tensor({2, 3, 4, 4}, rng), b = random_tensor(bshape, rng);
        check("add " + label, {a, b}, [=] { return proj(add(a, b)); });
        check("mul " + label, {a, b}, [=] { return proj(mul(a, b)); });
    }
    {
        TD a = random_tensor({2, 3, 4, 4}, rng), b = random_tensor({2, 3, 4, 4}, rng);
        check("sub", {a, b}, [=] { return proj(sub(a, b)); });
    }
    {
        TD x = random_tensor({3, 5}, rng);
        const std::vector<std::int64_t> idx{0, 4, 4, 7, 14, 2, 9};
        check("gather", {x}, [=] { return proj(gather(x, idx)); });
    }
    {
        TD x = random_tensor({2, 3, 8, 8}, rng);
        const std::uint64_t s = rng.next_u64();
        check("dropblock", {x}, [=] {
            Rng r(s);
            return proj(dropblock(x, 0.8, 3, true, r));
        });
    }
    {
        TD x = random_tensor({12}, rng, -3, 3);
        Array<double> t(12), w(12);
        for (int i = 0; i < 12; ++i) t[i] = rng.uniform() < 0.5 ? 0.0 : 1.0, w[i] = rng.uniform(0, 1);
        check("bce_with_logits", {x}, [=] { return bce_with_logits(x, t, w); });
    }
    {
        TD x = random_tensor({5, 4}, rng, -2, 2);
        std::vector<int> labels;
        for (int i = 0; i < 5; ++i) labels.push_back(int(rng.below(4)));
        check("softmax_cross_entropy", {x}, [=] { return softmax_cross_entropy(x, labels); });
    }
    {
        const int k = 6;
        Array<double> pv(4 * k), tv(4 * k);
        for (int i = 0; i < k; ++i) {
            pv[4 * i] = rng.uniform(2, 8), pv[4 * i + 1] = rng.uniform(2, 8);
            pv[4 * i + 2] = rng.uniform(1, 5), pv[4 * i + 3] = rng.uniform(1, 5);
            tv[4 * i] = pv[4 * i] + rng.uniform(-2, 2), tv[4 * i + 1] = pv[4 * i + 1] + rng.uniform(-2, 2);
            tv[4 * i + 2] = rng.uniform(1, 5), tv[4 * i + 3] = rng.uniform(1, 5);
        }
        TD pred({k, 4}, pv);
        check("ciou_loss exact alpha", {pred}, [=] {
            ExactCiouGradient exact;
            return proj(ciou_loss(pred, tv));
        });
        // Default adjoint: alpha frozen at the evaluation point.
        Array<double> r(k), alpha(k);
        auto box = [](const double* b) { return Box::from_center(b[0], b[1], b[2], b[3]); };
        for (int i = 0; i < k; ++i) r[i] = rng.uniform(-1, 1), alpha[i] = ciou_alpha(box(&pv[4 * i]), box(&tv[4 * i]));
        out.push_back(check_gradients(
            "ciou_loss alpha held", {pred}, [=] { return sum(mul_constant(ciou_loss(pred, tv), r)); }, rng, 48, 1e-6,
            tol, [=] {
                double total = 0;
                for (int i = 0; i < k; ++i)
                    total += r[i] * (1 - ciou_fixed_alpha(box(pred.data() + 4 * i), box(&tv[4 * i]), alpha[i]));
                return total;
            }));
    }

    // Attention blocks and their arrangements.
    const int c = 8, r = 2;
    {
        auto rca = RcaConfig<double>::random(c, r, rng);
        auto rsa = RsaConfig<double>::random(c, rng);
        auto cbam = CbamConfig<double>::random(c, r, rng);
        TD m = random_tensor({2, c, 6, 6}, rng);
        check("rca", {m, rca.w1, rca.w2}, [=] { return proj(rca_forward(m, rca)); });
        check("rsa", {m, rsa.kernel, rsa.bias}, [=] { return proj(rsa_forward(m, rsa)); });
        for (auto mode : {ArrangementMode::rca_only, ArrangementMode::rsa_only, ArrangementMode::rca_then_rsa,
                          ArrangementMode::rsa_then_rca, ArrangementMode::parallel})
            check("mrham " + std::string(to_string(mode)), {m, rca.w1, rca.w2, rsa.kernel, rsa.bias},
                  [=] { return proj(mrham_forward(m, rca, rsa, mode)); });
        check("cbam", {m, cbam.w1, cbam.w2, cbam.spatial_kernel}, [=] { return proj(cbam_forward(m, cbam)); });
    }
    for (BlockKind kind : {BlockKind::plain_residual, BlockKind::mrham, BlockKind::cbam}) {
        auto block = std::make_shared<Block<double>>(kind, c, rng, ArrangementMode::rca_then_rsa, r);
        ParamList<double> params;
        block->collect("b", params);
        TD x = random_tensor({2, c, 6, 6}, rng);
        std::vector<TD> inputs{x};
        for (auto& t : trainable(params)) inputs.push_back(t);
        check("block " + std::string(to_string(kind)), inputs, [=] {
            ForwardContext ctx{true, nullptr};
            return proj(block->forward(x, ctx));
        });
    }
    {
        auto layer = std::make_shared<ConvBnAct<double>>(3, 4, 3, 2, Activation::mish, rng);
        ParamList<double> params;
        layer->collect("l", params);
        TD x = random_tensor({2, 3, 6, 6}, rng);
        std::vector<TD> inputs{x};
        for (auto& t : trainable(params)) inputs.push_back(t);
        check("conv_bn_mish", inputs, [=] { return proj(layer->forward(x, {true, nullptr})); });
    }
    {
        // Detection loss on a 32-pixel input: grids 4, 2, 1.
        DetectorSpec spec;
        spec.input_size = 32;
        spec.num_classes = 2;
        spec.anchors = DetectorSpec::default_anchors(32);
        std::vector<TD> raw;
        for (int s = 0; s < 3; ++s)
            raw.push_back(random_tensor({2, kAnchorsPerScale * spec.channels_per_anchor(), spec.grid(s), spec.grid(s)},
                                        rng, -1, 1));
        std::vector<std::vector<GroundTruth>> gts{
            {{0, Box::from_center(0.3, 0.4, 0.2, 0.3)}, {1, Box::from_center(0.7, 0.6, 0.5, 0.4)}},
            {{1, Box::from_center(0.5, 0.5, 0.9, 0.8)}}};
        const TargetAssignment assignment = assign_targets(gts, spec);
        check("detection_loss", raw, [=] {
            ExactCiouGradient exact;
            return detection_loss(RawPrediction<double>(raw), assignment, spec).total;
        });
    }
    return out;
}

std::vector<GradCheckResult> run_gradient_suite(int num_seeds, double tolerance) {
    std::vector<GradCheckResult> worst;
    for (int s = 0; s < num_seeds; ++s) {
        const auto results = gradient_suite(static_cast<std::uint64_t>(s), tolerance);
        if (worst.empty()) {
            worst = results;
            continue;
        }
        for (std::size_t i = 0; i < results.size(); ++i) {
            worst[i].max_rel_error = std::max(worst[i].max_rel_error, results[i].max_rel_error);
            worst[i].checked += results[i].checked;
            worst[i].passed = worst[i].passed && results[i].passed;
        }
    }
    return worst;
}

}  // namespace mrham
