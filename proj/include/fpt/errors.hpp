#ifndef FPT_ERRORS_HPP
#define FPT_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace fpt {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

#define FPT_DEFINE_ERROR(Name)                                                \
    class Name : public Error {                                               \
    public:                                                                   \
        using Error::Error;                                                   \
    }

FPT_DEFINE_ERROR(ShapeMismatch);
FPT_DEFINE_ERROR(ChannelMismatch);
FPT_DEFINE_ERROR(DegenerateOutput);
FPT_DEFINE_ERROR(UnadaptableConsumer);
FPT_DEFINE_ERROR(UnsupportedShortcutKind);
FPT_DEFINE_ERROR(OddChannelCount);
FPT_DEFINE_ERROR(InvalidFinalSigma);
FPT_DEFINE_ERROR(NonIdempotentActivation);
FPT_DEFINE_ERROR(WidthNotIncreased);
FPT_DEFINE_ERROR(EmptyContext);
FPT_DEFINE_ERROR(NonFiniteLoss);
FPT_DEFINE_ERROR(NonFiniteGradient);
FPT_DEFINE_ERROR(IoError);
FPT_DEFINE_ERROR(MalformedFile);
FPT_DEFINE_ERROR(LabelOutOfRange);
FPT_DEFINE_ERROR(ZeroStd);
FPT_DEFINE_ERROR(InvalidMultiplier);
FPT_DEFINE_ERROR(ConfigError);

#undef FPT_DEFINE_ERROR

} // namespace fpt

#endif
