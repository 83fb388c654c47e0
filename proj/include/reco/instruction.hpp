#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>

#include "reco/errors.hpp"

namespace reco {

enum class Task : std::uint8_t { add = 0, remove = 1, replace = 2, style = 3 };
enum class ShapeKind : std::uint8_t { square = 0, circle = 1, triangle = 2 };
enum class StyleKind : std::uint8_t { grayscale = 0, hue_rotate = 1, sepia = 2, invert = 3 };

inline constexpr std::size_t kNumTasks = 4;
inline constexpr std::size_t kNumShapes = 3;
inline constexpr std::size_t kNumColors = 8;
inline constexpr std::size_t kNumStyles = 4;
inline constexpr std::size_t kNumTrajectories = 16;

inline const char* task_name(Task t) {
    switch (t) {
        case Task::add: return "add";
        case Task::remove: return "remove";
        case Task::replace: return "replace";
        case Task::style: return "style";
    }
    return "?";
}

inline Task task_from_name(const std::string& s) {
    if (s == "add") return Task::add;
    if (s == "remove") return Task::remove;
    if (s == "replace") return Task::replace;
    if (s == "style") return Task::style;
    throw ValidationError("unknown task '" + s + "'");
}

inline const char* shape_name(ShapeKind s) {
    switch (s) {
        case ShapeKind::square: return "square";
        case ShapeKind::circle: return "circle";
        case ShapeKind::triangle: return "triangle";
    }
    return "?";
}

inline const char* style_name(StyleKind s) {
    switch (s) {
        case StyleKind::grayscale: return "grayscale";
        case StyleKind::hue_rotate: return "hue-rotate";
        case StyleKind::sepia: return "sepia";
        case StyleKind::invert: return "invert";
    }
    return "?";
}

inline constexpr std::array<const char*, kNumColors> kColorNames = {"red",    "green",  "blue",  "yellow",
                                                                    "purple", "orange", "white", "cyan"};

struct ObjectRef {
    ShapeKind shape = ShapeKind::square;
    std::uint8_t color = 0;
    bool operator==(const ObjectRef&) const = default;
};

/// Discrete editing instruction. Local tasks name a subject; replace adds
/// the substitute object; style carries only the style id.
struct Instruction {
    Task task = Task::add;
    std::optional<ObjectRef> subject;
    std::optional<ObjectRef> object2;
    std::optional<StyleKind> style;
    std::optional<std::uint8_t> trajectory;

    bool operator==(const Instruction&) const = default;

    void validate() const {
        auto check_obj = [](const ObjectRef& o) {
            if (static_cast<std::size_t>(o.shape) >= kNumShapes) throw ValidationError("instruction: shape id out of vocab");
            if (o.color >= kNumColors) throw ValidationError("instruction: color id out of vocab");
        };
        if (static_cast<std::size_t>(task) >= kNumTasks) throw ValidationError("instruction: task id out of vocab");
        if (task == Task::style) {
            if (!style) throw ValidationError("instruction: style task requires a style id");
            if (static_cast<std::size_t>(*style) >= kNumStyles) throw ValidationError("instruction: style id out of vocab");
            if (subject || object2 || trajectory) throw ValidationError("instruction: style task takes only a style id");
            return;
        }
        if (!subject) throw ValidationError("instruction: local task requires a subject");
        check_obj(*subject);
        if (task == Task::replace && !object2) throw ValidationError("instruction: replace requires object2");
        if (task != Task::replace && object2) throw ValidationError("instruction: object2 only valid for replace");
        if (object2) check_obj(*object2);
        if (style) throw ValidationError("instruction: style id only valid for style task");
        if (trajectory && *trajectory >= kNumTrajectories) throw ValidationError("instruction: trajectory id out of vocab");
    }

    std::string text() const {
        auto obj = [](const ObjectRef& o) { return std::string(kColorNames[o.color]) + " " + shape_name(o.shape); };
        switch (task) {
            case Task::add: return "add a " + obj(*subject);
            case Task::remove: return "remove the " + obj(*subject);
            case Task::replace: return "replace the " + obj(*subject) + " with a " + obj(*object2);
            case Task::style: return std::string("apply the ") + style_name(*style) + " style";
        }
        return {};
    }
};

// Token layout: disjoint id ranges per slot kind so the encoding is
// injective; 0 is padding.
namespace vocab {
inline constexpr std::uint32_t pad = 0;
inline constexpr std::uint32_t task0 = 1;
inline constexpr std::uint32_t shape0 = task0 + kNumTasks;
inline constexpr std::uint32_t color0 = shape0 + kNumShapes;
inline constexpr std::uint32_t style0 = color0 + kNumColors;
inline constexpr std::uint32_t trajectory0 = style0 + kNumStyles;
inline constexpr std::uint32_t size = trajectory0 + kNumTrajectories;
}  // namespace vocab

inline constexpr std::size_t kInstructionLength = 6;

/// [task, subject shape, subject color, object2 shape, object2 color,
///  style or trajectory]
inline std::array<std::uint32_t, kInstructionLength> encode_instruction(const Instruction& in) {
    in.validate();
    std::array<std::uint32_t, kInstructionLength> ids{};
    ids.fill(vocab::pad);
    ids[0] = vocab::task0 + static_cast<std::uint32_t>(in.task);
    if (in.subject) {
        ids[1] = vocab::shape0 + static_cast<std::uint32_t>(in.subject->shape);
        ids[2] = vocab::color0 + in.subject->color;
    }
    if (in.object2) {
        ids[3] = vocab::shape0 + static_cast<std::uint32_t>(in.object2->shape);
        ids[4] = vocab::color0 + in.object2->color;
    }
    if (in.style)
        ids[5] = vocab::style0 + static_cast<std::uint32_t>(*in.style);
    else if (in.trajectory)
        ids[5] = vocab::trajectory0 + *in.trajectory;
    return ids;
}

}  // namespace reco
